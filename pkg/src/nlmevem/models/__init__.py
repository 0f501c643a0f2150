"""Built-in model catalog."""

from ..errors import CatalogError
from .base import Model, OdeModel, cholesky
from .neural import MiniNeuralODE
from .pk import OneCompartmentPK, WarfarinPKPD
from .simple import PPCA, LinearGaussian, Logistic1D

CATALOG = {
    "linear_gaussian": LinearGaussian,
    "ppca": PPCA,
    "logistic_1d": Logistic1D,
    "one_cmt_pk": OneCompartmentPK,
    "warfarin_pkpd": WarfarinPKPD,
    "mini_neural_ode": MiniNeuralODE,
}


def catalog_lookup(name, **options):
    """Instantiate the built-in model ``name`` (options go to its constructor)."""
    try:
        cls = CATALOG[name]
    except KeyError:
        raise CatalogError(f"unknown model {name!r}; available: {', '.join(sorted(CATALOG))}") from None
    return cls(**options)


__all__ = [
    "CATALOG",
    "Model",
    "OdeModel",
    "cholesky",
    "catalog_lookup",
    "LinearGaussian",
    "PPCA",
    "Logistic1D",
    "OneCompartmentPK",
    "WarfarinPKPD",
    "MiniNeuralODE",
]
