"""Python front end for the ecer C++ core."""

import json

from ._ecer import (
    EcerError,
    RunConfig,
    classify,
    contrastive_loss,
    episode_seed,
    global_similarity_matrix,
    sample_episode,
    select_top_k,
    summarize_accuracies,
)
from . import _ecer

__all__ = [
    "EcerError",
    "RunConfig",
    "classify",
    "config",
    "contrastive_loss",
    "episode_seed",
    "error_info",
    "evaluate",
    "evaluate_cross_domain",
    "export_maps",
    "finetune",
    "gen_entities",
    "gen_synth",
    "global_similarity_matrix",
    "pretrain",
    "sample_episode",
    "select_top_k",
    "summarize_accuracies",
]


def config(preset=None, overrides=None, **dotted):
    """Build a RunConfig: preset, then a nested dict, then dotted keys (use __ for dots)."""
    c = RunConfig()
    if preset:
        c.apply_preset(preset)
    if overrides:
        c.merge_json(json.dumps(overrides))
    for key, value in dotted.items():
        c.set(key.replace("__", "."), value if isinstance(value, str) else json.dumps(value))
    return c


def echo(c):
    return json.loads(c.echo_json())


def error_info(err):
    """(message, code name, CLI exit code) of an EcerError."""
    return tuple(err.args)


def _wrap(fn):
    def call(c):
        return json.loads(fn(c))

    call.__name__ = fn.__name__
    call.__doc__ = fn.__doc__
    return call


gen_synth = _wrap(_ecer.gen_synth)
pretrain = _wrap(_ecer.pretrain)
gen_entities = _wrap(_ecer.gen_entities)
finetune = _wrap(_ecer.finetune)
evaluate = _wrap(_ecer.evaluate)
evaluate_cross_domain = _wrap(_ecer.evaluate_cross_domain)
export_maps = _wrap(_ecer.export_maps)
