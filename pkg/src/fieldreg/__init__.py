"""Volumetric image registration via decomposed displacement fields.

An affine block plus region-specific deformable blocks predict displacement
fields that accumulate into one transform, trained unsupervised with
mutual-information, Dice, and bending-energy losses.

Submodules import lazily so the CLI can configure BLAS threading before
numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Grid": "volume",
    "Volume": "volume",
    "LabelMask": "volume",
    "AffineParams": "fields",
    "DisplacementField": "fields",
    "JacobianMap": "fields",
}


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
