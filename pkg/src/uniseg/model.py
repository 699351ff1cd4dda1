"""Model state: backbone weights, per-class parameter-generator maps, the
fixed embedding store and the taxonomy snapshot, plus the forward paths
shared by training and inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import clipdriver as cd
from .errors import MissingEmbedding
from .taxonomy import Taxonomy


@dataclass
class ModelState:
    taxonomy: Taxonomy
    embeddings: cd.EmbeddingStore
    backbone_cfg: bb.BackboneConfig
    backbone: dict[str, np.ndarray]
    lpg: dict[int, cd.LpgMap]
    step: int = 0
    adam: dict = field(default_factory=dict)  # owned by training.AdamW
    config_echo: str = ""

    @property
    def lpg_in_dim(self) -> int:
        return self.embeddings.dim + self.backbone_cfg.global_feature_dim

    def classes(self) -> list[int]:
        return self.taxonomy.indices()

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Flat view of every trainable array, keyed by a stable path."""
        out = {f"backbone/{k}": v for k, v in self.backbone.items()}
        for cls in sorted(self.lpg):
            out[f"lpg/{cls}/W"] = self.lpg[cls].weight
            out[f"lpg/{cls}/b"] = self.lpg[cls].bias
        return out

    def set_parameter(self, path: str, value: np.ndarray) -> None:
        if path.startswith("backbone/"):
            self.backbone[path.split("/", 1)[1]] = value
        else:
            _, cls, leaf = path.split("/")
            m = self.lpg[int(cls)]
            if leaf == "W":
                self.lpg[int(cls)] = cd.LpgMap(value, m.bias)
            else:
                self.lpg[int(cls)] = cd.LpgMap(m.weight, value)


def init_model(taxonomy: Taxonomy, embeddings: cd.EmbeddingStore,
               backbone_cfg: bb.BackboneConfig, seed: int) -> ModelState:
    """Seeded He-normal initialization of the backbone and one parameter
    generator per taxonomy class."""
    for cls in taxonomy.indices():
        if cls not in embeddings:
            raise MissingEmbedding(f"class {cls} has no embedding in the store")
    rng = np.random.default_rng(seed)
    params = bb.init_backbone(backbone_cfg, rng)
    n_out = cd.head_param_count(backbone_cfg.decoder_channels)
    in_dim = embeddings.dim + backbone_cfg.global_feature_dim
    lpg = {cls: cd.init_lpg_map(rng, n_out, in_dim) for cls in taxonomy.indices()}
    return ModelState(taxonomy, embeddings, backbone_cfg, params, lpg)


@dataclass
class SampleTape:
    """Tapes from one full forward (backbone + one head per class)."""
    backbone_tape: bb.BackboneTape
    head_tapes: dict[int, cd.HeadTape]
    lpg_inputs: dict[int, np.ndarray]
    heads: dict[int, cd.HeadParams]


def forward_sample(model: ModelState, x: np.ndarray, classes=None):
    """Forward one patch through backbone and the heads of ``classes``
    (default: every taxonomy class). Returns (probs, tape)."""
    if classes is None:
        classes = model.classes()
    fd, f, btape = bb.forward(x, model.backbone, model.backbone_cfg)
    probs: dict[int, np.ndarray] = {}
    head_tapes: dict[int, cd.HeadTape] = {}
    lpg_inputs: dict[int, np.ndarray] = {}
    heads: dict[int, cd.HeadParams] = {}
    for cls in sorted(classes):
        head, _, u = cd.generate_params(
            cls, model.embeddings.get(cls), f, model.lpg[cls],
            model.backbone_cfg.decoder_channels)
        p, htape = cd.head_forward(fd, head, model.backbone_cfg.act_slope)
        probs[cls] = p
        head_tapes[cls] = htape
        lpg_inputs[cls] = u
        heads[cls] = head
    return probs, SampleTape(btape, head_tapes, lpg_inputs, heads)


def backward_sample(model: ModelState, tape: SampleTape,
                    grad_probs: dict[int, np.ndarray],
                    detach_global_feature: bool = False):
    """Adjoint of forward_sample for the classes present in ``grad_probs``.

    Returns gradients keyed like named_parameters(); classes absent from
    ``grad_probs`` simply do not appear (their gradient is exactly zero).
    """
    cfg = model.backbone_cfg
    d_text = model.embeddings.dim
    g_fd = None
    g_f = np.zeros(cfg.global_feature_dim)
    grads: dict[str, np.ndarray] = {}
    for cls in sorted(grad_probs):
        g_theta, g_fd_cls = cd.head_backward(tape.head_tapes[cls],
                                             tape.heads[cls], grad_probs[cls])
        g_fd = g_fd_cls if g_fd is None else g_fd + g_fd_cls
        gw, gb, g_f_cls = cd.lpg_backward(g_theta, tape.lpg_inputs[cls],
                                          model.lpg[cls], d_text)
        grads[f"lpg/{cls}/W"] = gw
        grads[f"lpg/{cls}/b"] = gb
        if not detach_global_feature:
            g_f += g_f_cls
    if g_fd is None:
        g_fd = np.zeros(tape.backbone_tape.fd_shape)
    bgrads, _ = bb.backward(tape.backbone_tape, model.backbone, g_fd, g_f)
    for k, v in bgrads.items():
        grads[f"backbone/{k}"] = v
    return grads


def predict_patch(model: ModelState, x: np.ndarray, classes=None) -> dict[int, np.ndarray]:
    """Inference forward: per-class probability maps for one patch."""
    probs, _ = forward_sample(model, x, classes)
    return probs


def make_window_predictor(model: ModelState, classes=None):
    """Adapter for inference.sliding_window."""
    def predict(patch: np.ndarray) -> dict[int, np.ndarray]:
        return predict_patch(model, patch, classes)
    return predict
