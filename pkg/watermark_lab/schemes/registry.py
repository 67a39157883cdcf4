"""
Scheme registry: maps scheme names to their classes and parameter models.
"""

import logging
from typing import Any, Optional

from pydantic import BaseModel, ValidationError

from ..errors import ConfigurationError
from .base import WatermarkScheme
from .exp import ExpParams, ExpScheme
from .kgw import KgwParams, KgwScheme
from .synthetic import SyntheticParams, SyntheticScheme
from .unigram import UnigramParams, UnigramScheme

logger = logging.getLogger(__name__)

SCHEMES: dict[str, tuple[type[WatermarkScheme], type[BaseModel]]] = {
    "kgw": (KgwScheme, KgwParams),
    "unigram": (UnigramScheme, UnigramParams),
    "exp": (ExpScheme, ExpParams),
    "synthetic": (SyntheticScheme, SyntheticParams),
}


def scheme_names() -> list[str]:
    return sorted(SCHEMES)


def default_attack_steps(name: str) -> Optional[int]:
    """Attack budget used when max_steps is left unset (None for synthetic)."""
    return _lookup(name)[0].default_attack_steps


def _lookup(name: str) -> tuple[type[WatermarkScheme], type[BaseModel]]:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown scheme '{name}'; expected one of {', '.join(scheme_names())}"
        ) from None


def build_scheme(name: str, params: Any = None, vocab_size: Optional[int] = None) -> WatermarkScheme:
    """
    Instantiate a scheme from its name and raw parameters.

    Args:
        name: Registered scheme name
        params: Parameter model instance or mapping (None = defaults)
        vocab_size: Vocabulary size, needed by EXP detection

    Returns:
        Configured scheme

    Raises:
        ConfigurationError: If the name is unknown or the parameters are invalid
    """
    scheme_cls, params_cls = _lookup(name)
    if not isinstance(params, params_cls):
        try:
            params = params_cls.model_validate(params or {})
        except ValidationError as e:
            raise ConfigurationError(f"invalid {name} parameters: {e}") from e
    if scheme_cls is ExpScheme:
        return ExpScheme(params, vocab_size=vocab_size)
    return scheme_cls(params)
