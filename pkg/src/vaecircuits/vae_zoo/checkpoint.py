"""Binary model checkpoints.

Layout (all little-endian)::

    magic  b"VAEZ" | u2 version
    u2 len + utf-8 JSON header   (variant, widths, latent_dim, input_dim, seed,
                                  hyperparameters, final_mse, epochs_run, converged)
    matrix blobs in fixed order: each encoder layer (W, b), mu head (W, b),
    logvar head (W, b), each decoder layer (W, b), then discriminator layers
    when present. A blob is <u4 rows><u4 cols> followed by float64 data.

Biases are stored as 1 x out matrices. ``final_mse`` travels in the header as
the hex form of the float so the round trip is bit-exact.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

from ..tensor_core import Activation, ConfigurationError, DenseLayer, read_matrix, write_matrix
from .model import TrainedModel, VaeArchitectureSpec

MAGIC = b"VAEZ"
VERSION = 1


def _stacks(model: TrainedModel):
    yield model.encoder_layers
    yield [model.mu_head]
    yield [model.logvar_head]
    yield model.decoder_layers
    if model.discriminator is not None:
        yield model.discriminator


def dumps(model: TrainedModel) -> bytes:
    spec = model.spec
    header = {
        "variant": spec.variant.value,
        "encoder_widths": list(spec.encoder_widths),
        "latent_dim": spec.latent_dim,
        "discriminator_widths": list(spec.discriminator_widths),
        "hyper": {k: float(getattr(spec, k)).hex() for k in ("beta", "tc_weight", "gamma", "lambda_od", "lambda_d")},
        "input_dim": model.input_dim,
        "seed": model.seed,
        "final_mse": float(model.final_mse).hex(),
        "epochs_run": model.epochs_run,
        "converged": model.converged,
        "has_discriminator": model.discriminator is not None,
        "activations": [[l.activation.value for l in stack] for stack in _stacks(model)],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(raw)))
    buf.write(raw)
    for stack in _stacks(model):
        for layer in stack:
            write_matrix(buf, layer.weight)
            write_matrix(buf, layer.bias)
    return buf.getvalue()


def loads(data: bytes) -> TrainedModel:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise ConfigurationError("not a model checkpoint")
    version, n = struct.unpack("<HI", buf.read(6))
    if version != VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    h = json.loads(buf.read(n).decode("utf-8"))
    spec = VaeArchitectureSpec(
        variant=h["variant"],
        encoder_widths=tuple(h["encoder_widths"]),
        latent_dim=h["latent_dim"],
        discriminator_widths=tuple(h["discriminator_widths"]),
        **{k: float.fromhex(v) for k, v in h["hyper"].items()},
    )
    stacks = []
    for acts in h["activations"]:
        layers = []
        for act in acts:
            w = read_matrix(buf)
            b = read_matrix(buf).reshape(-1)
            layers.append(DenseLayer(w, b, Activation(act)))
        stacks.append(layers)
    disc = stacks[4] if h["has_discriminator"] else None
    return TrainedModel(
        spec, h["input_dim"], stacks[0], stacks[1][0], stacks[2][0], stacks[3], disc,
        seed=h["seed"], final_mse=float.fromhex(h["final_mse"]),
        epochs_run=h["epochs_run"], converged=h["converged"],
    )


def save(model: TrainedModel, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> TrainedModel:
    return loads(Path(path).read_bytes())
