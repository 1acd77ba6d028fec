import os
from typing import Callable

from .base import (Backend, ContextLengthError, GenerationResult, LayerTrace, ModelInfo,
                   finite_difference_jacobian)
from .cache import ActivationCache
from .synthetic import ByteTokenizer, SyntheticLinearBackend, ToyMLPBackend

BLOOM_LANGUAGES = frozenset({"ar", "ca", "en", "es", "fr", "vi", "zh"})
LLAMA2_LANGUAGES = frozenset({"ca", "en", "es", "fr", "hu", "ja", "ko", "nl", "ru", "uk", "vi", "zh"})

_HF_MODELS = {
    "bloom-560m": ("bigscience/bloom-560m", BLOOM_LANGUAGES),
    "llama2-7b": ("meta-llama/Llama-2-7b-hf", LLAMA2_LANGUAGES),
}

# a local checkpoint directory takes precedence over the hub id
MODEL_PATH_ENV = {"bloom-560m": "XLINGUAL_BLOOM_PATH", "llama2-7b": "XLINGUAL_LLAMA2_PATH"}

_FACTORIES: dict[str, Callable[..., Backend]] = {
    "synthetic-linear": lambda **kw: SyntheticLinearBackend.random(**kw),
    "toy-mlp": lambda **kw: ToyMLPBackend(**kw),
}


def register_backend(name: str, factory: Callable[..., Backend]):
    _FACTORIES[name] = factory


def available_backends() -> list[str]:
    return sorted(set(_FACTORIES) | set(_HF_MODELS))


def load_backend(name: str, **kwargs) -> Backend:
    """Instantiate a backend by registry name, or ``hf:<model id>`` for any hub model."""
    if name in _FACTORIES:
        return _FACTORIES[name](**kwargs)
    from .hf import HFBackend

    if name in _HF_MODELS:
        model_id, langs = _HF_MODELS[name]
        model_id = os.environ.get(MODEL_PATH_ENV[name]) or model_id
        return HFBackend.from_pretrained(model_id, name=name, languages=langs, **kwargs)
    if name.startswith("hf:"):
        return HFBackend.from_pretrained(name[3:], **kwargs)
    raise KeyError(f"unknown backend {name!r}; available: {available_backends()}")


__all__ = [
    "ActivationCache", "Backend", "BLOOM_LANGUAGES", "ByteTokenizer", "ContextLengthError",
    "GenerationResult", "LLAMA2_LANGUAGES", "LayerTrace", "MODEL_PATH_ENV", "ModelInfo", "SyntheticLinearBackend",
    "ToyMLPBackend", "available_backends", "finite_difference_jacobian", "load_backend",
    "register_backend",
]
