"""Latent-token interpretation and editing for CLIP-style vision transformers.

Arrays are numpy: patches and hidden states float32, images uint8 H x W x 3.
Structured results (rankings, interpretations, saliency maps) are returned as
plain dicts and lists.
"""

import json as _json

from . import _vitlens
from ._vitlens import (
    Bundle,
    DriftTable,
    Plan,
    Toy,
    Trace,
    VitlensError,
    Vocabulary,
    ablated_forward,
    calibrate_drift,
    content_hash,
    decode_image,
    forward,
    load_image,
    make_toy,
    match,
    model_frame,
    preprocess,
    project_to_joint,
    rollout,
    swap_plan,
    zero_plan,
)

__all__ = [
    "Bundle", "DriftTable", "Plan", "Toy", "Trace", "VitlensError", "Vocabulary",
    "ablated_forward", "apply", "calibrate_drift", "classify", "content_hash",
    "decode_image", "forward", "interpret", "load_image", "make_toy", "manifest",
    "match", "model_frame", "preprocess", "project_to_joint", "rollout", "run_cli",
    "saliency", "swap_plan", "zero_plan",
]


def manifest(bundle):
    return _json.loads(bundle.manifest_json)


def classify(bundle, patches, vocab, plan=None):
    return _json.loads(_vitlens.classify(bundle, patches, vocab, plan))


def interpret(trace, bundle, vocab, layer, position=None, top_k=0, drift=None,
              samples=100, seed=0, threads=0):
    """Interpretation of token (layer, position), or of every position of
    `layer` when position is None. Smoothing applies when `drift` is given."""
    return _json.loads(_vitlens.interpret(trace, bundle, vocab, layer, position, top_k,
                                          drift, samples, seed, threads))


def saliency(trace, layer, position, threshold=None):
    if threshold is None:
        return _json.loads(_vitlens.saliency(trace, layer, position))
    return _json.loads(_vitlens.saliency(trace, layer, position, threshold))


def apply(plan, patches, bundle, vocab):
    ranking, trace = _vitlens.apply(plan, patches, bundle, vocab)
    return _json.loads(ranking), trace


def run_cli(args):
    """Runs the command-line tool in process; returns (exit_code, stdout, stderr)."""
    return _vitlens.run_cli([str(a) for a in args])
