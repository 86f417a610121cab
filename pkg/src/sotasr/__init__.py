"""Desk-scale serialized output training for multi-speaker sequence recognition.

Subpackages cover a minimal reverse-mode autodiff core (`autodiff`), the
neural blocks built on it (`nn`), training objectives (`losses`), label
serialization and error-rate scoring (`labels`), the four model variants
(`models`), and the synthetic-task experiment harness (`data`, `harness`,
`cli`).
"""

__version__ = "0.1.0"
