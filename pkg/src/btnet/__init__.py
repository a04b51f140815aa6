"""Rotation-equivariant bilinear tensor networks for (toy) b-jet tagging.

Modules: ``geometry`` (rotations), ``channels`` (typed feature containers),
``layers`` (equivariant maps), ``autodiff`` (tape + Adam), ``models``
(PFN baseline and BTN), ``datagen`` (toy generator and file format),
``metrics`` (ROC/AUC/rejection), ``training``, ``ablation``, ``check``,
``config`` and ``cli``.
"""
__version__ = "0.1.0"
