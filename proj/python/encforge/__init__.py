"""Python access to the encforge encoder toolkit (64-bit models)."""

import json

from . import _encforge
from ._encforge import (
    CapacityError,
    ConfigError,
    EncforgeError,
    InputError,
    NumericError,
    attention_pair_count,
    build_batch_ladder,
    check_tensor_core,
    local_global_pair_ratio,
    pack_greedy,
    parameter_count as _parameter_count,
    sm_utilization,
    synth_corpus,
    tile_blocks,
)

__all__ = [
    "CapacityError",
    "ConfigError",
    "EncforgeError",
    "InputError",
    "Model",
    "NumericError",
    "attention_pair_count",
    "audit_config",
    "build_batch_ladder",
    "check_tensor_core",
    "default_gpu_basket",
    "gen_bench_sets",
    "local_global_pair_ratio",
    "lr_at",
    "model_preset",
    "pack_greedy",
    "parameter_count",
    "sm_utilization",
    "synth_corpus",
    "tile_blocks",
    "train",
]


def _dump(obj):
    return obj if isinstance(obj, str) else json.dumps(obj)


def model_preset(name):
    return json.loads(_encforge.model_preset(name))


def parameter_count(config):
    return _parameter_count(_dump(config))


def default_gpu_basket():
    return json.loads(_encforge.default_gpu_basket())


def audit_config(config, basket=None, utilization="occupancy"):
    if isinstance(config, str) and not config.lstrip().startswith("{"):
        config = model_preset(config)
    raw = _encforge.audit_config(_dump(config), None if basket is None else _dump(basket), utilization)
    return json.loads(raw)


def gen_bench_sets(spec):
    return _encforge.gen_bench_sets(_dump(spec))


def lr_at(tokens_seen, schedule, lr_peak):
    return _encforge.lr_at(tokens_seen, _dump(schedule), lr_peak)


class Model:
    """Encoder with float64 parameters."""

    def __init__(self, config="tiny", seed=0, _handle=None):
        if _handle is not None:
            self._m = _handle
            return
        if isinstance(config, str) and not config.lstrip().startswith("{"):
            config = model_preset(config)
        self._m = _encforge.Model(_dump(config), seed)

    @classmethod
    def load(cls, path):
        return cls(_handle=_encforge.Model.load(str(path)))

    @property
    def config(self):
        return json.loads(self._m.config())

    def parameter_count(self):
        return self._m.parameter_count()

    def forward(self, ids, cu_seqlens):
        """Logits [tokens, vocab] for a packed stream."""
        return self._m.forward(list(ids), list(cu_seqlens))

    def evaluate(self, docs, capacity=128, seed=0):
        loss, acc, labeled = self._m.evaluate(docs, capacity, seed)
        return {"val_loss": loss, "masked_token_accuracy": acc, "labeled": labeled}

    def save(self, path):
        self._m.save(str(path))


def train(run, docs, heldout, heldout_seed=0):
    """Trains from a fresh Megatron init; returns (Model, metrics)."""
    handle, metrics = _encforge.train(_dump(run), docs, heldout, heldout_seed)
    return Model(_handle=handle), list(metrics)
