"""Structured-text (INI) configs and the named reference configurations.

A config file has optional ``[decoder]``, ``[encoder]``, ``[training]`` and
``[generation]`` sections of ``key = value`` lines.  ``base = <name>`` in a
``[model]`` section starts from a named config before applying overrides.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any

from .decoder import DecoderConfig, ModelConfig
from .text_frontend import EncoderConfig
from .training import TrainerConfig


def _reference(variant: str, layers: int, dim: int) -> ModelConfig:
    return ModelConfig(
        DecoderConfig(
            variant=variant, num_layers=layers, model_dim=dim, ssm_state_dim=16,
            num_heads=16, num_levels=8, codebook_size=1024,
        ),
        EncoderConfig(num_layers=4, model_dim=dim, num_heads=16, vocab_size=64),
    )


def named_config(name: str, variant: str | None = None) -> ModelConfig:
    """``desk``, ``toy``, ``bench`` or ``paper-830m`` (dims per variant from the reference table)."""
    variant = variant or "mamba_xattn"
    if name == "paper-830m":
        layers, dim = {
            "mamba_xattn": (12, 1808),
            "transformer_xattn": (12, 1840),
            "mamba_concat": (16, 2016),
        }[variant]
        return _reference(variant, layers, dim)
    dims = {
        # name: (layers, d, n, heads, K, S, encoder layers)
        "desk": (4, 128, 16, 4, 4, 256, 4),
        "bench": (2, 32, 8, 4, 4, 64, 2),
        "toy": (2, 8, 4, 2, 2, 4, 1),
    }
    if name not in dims:
        raise KeyError(f"unknown named config {name!r}")
    layers, d, n, heads, K, S, enc = dims[name]
    return ModelConfig(
        DecoderConfig(variant=variant, num_layers=layers, model_dim=d, ssm_state_dim=n,
                      num_heads=heads, num_levels=K, codebook_size=S),
        EncoderConfig(num_layers=enc, model_dim=d, num_heads=heads, vocab_size=32),
    )


def _coerce(cls, values: dict[str, str], base: Any = None):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for key, raw in values.items():
        if key not in fields:
            raise KeyError(f"unknown {cls.__name__} key {key!r}")
        typ = fields[key].type
        if typ in ("int", int):
            kwargs[key] = int(raw)
        elif typ in ("float", float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    return cls(**kwargs)


def load_config(path: str | Path | None = None, name: str = "desk", variant: str | None = None) -> dict:
    """Return ``{"model": ModelConfig, "training": TrainerConfig, "generation": dict}``."""
    cp = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file {path} not found")
        cp.read(path)
    model_sec = dict(cp["model"]) if cp.has_section("model") else {}
    name = model_sec.get("base", name)
    dec_over = dict(cp["decoder"]) if cp.has_section("decoder") else {}
    variant = variant or dec_over.get("variant") or model_sec.get("variant")
    base = named_config(name, variant)
    if variant:
        dec_over["variant"] = variant
    decoder = _coerce(DecoderConfig, dec_over, base.decoder)
    encoder = _coerce(EncoderConfig, dict(cp["encoder"]) if cp.has_section("encoder") else {}, base.encoder)
    training = _coerce(TrainerConfig, dict(cp["training"]) if cp.has_section("training") else {})
    generation = dict(cp["generation"]) if cp.has_section("generation") else {}
    return {"model": ModelConfig(decoder, encoder), "training": training, "generation": generation}


def save_model_config(path: str | Path, config: ModelConfig) -> None:
    cp = configparser.ConfigParser()
    cp["decoder"] = {k: str(v) for k, v in dataclasses.asdict(config.decoder).items()}
    cp["encoder"] = {k: str(v) for k, v in dataclasses.asdict(config.encoder).items()}
    with open(path, "w") as fh:
        cp.write(fh)


def load_model_config(path: str | Path) -> ModelConfig:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"model config {path} not found")
    return ModelConfig(_coerce(DecoderConfig, dict(cp["decoder"])), _coerce(EncoderConfig, dict(cp["encoder"])))
