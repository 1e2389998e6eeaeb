"""Layer-aggregating attention back-end for environmental sound deepfake detection.

Submodules: ``tensor`` (reverse-mode autodiff), ``features`` (ESDF files,
manifests, cropping), ``synth`` (synthetic layered features), ``mhfa``
(model and checkpoints), ``dsu`` (statistics perturbation), ``trainer``
(AdamW loop), ``scoring`` (EER and fusion), ``cli``.
"""

__version__ = "0.1.0"
