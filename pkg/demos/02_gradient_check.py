"""Finite-difference check of every parameter block of the full model.

A second run flips the sign of the attention gradient to show the
checker names the broken block.

Run: python3 demos/02_gradient_check.py
"""

from handseg import model as mdl
from handseg import trainer

report = trainer.grad_check_model(mdl.TINY_CONFIG, seed=0)
for line in report.lines():
    print(line)

print()
broken = trainer.grad_check_model(mdl.TINY_CONFIG, seed=0, corrupt_block="attn")
print("with a corrupted attention gradient:", broken.lines()[-1])
print("failing blocks:", broken.failing_blocks())
