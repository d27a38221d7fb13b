"""Synthetic pointer-meter reading lab.

Modules
-------
dialgen   procedural dial renderer, corruptions and corpus manifests
metrics   Ref / Rel / Acc_eps / Acc_theta and grouped report tables
tensor    small reverse-mode autodiff engine on numpy
mrlm      template cross-attention + expert-mixture reading model
trainer   AdamW two-stage training, evaluation and ablations
georead   classical angle-method reader used as an oracle
checks    property suite behind ``meterlab verify``
"""
__version__ = "0.1.0"
