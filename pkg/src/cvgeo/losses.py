"""Contrastive objectives over street (g), satellite (s) and drone-scene (d_s1..d_s3) embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

SCALE_KEYS = ("s1", "s2", "s3")
NORM_TOL = 1e-6


@dataclass
class LossConfig:
    temperature: float = 0.07
    lam: float = 3.0
    direction: str = "symmetric"  # or "paper_one_way"
    ssl_positives: str = "independent"  # or "identical": draw A serves as its own positive

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.direction not in ("symmetric", "paper_one_way"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.ssl_positives not in ("independent", "identical"):
            raise ValueError(f"unknown ssl_positives mode {self.ssl_positives!r}")


@dataclass
class LossReport:
    l_cc: torch.Tensor
    l_sc: torch.Tensor
    l_total: torch.Tensor
    pairs: dict[str, float] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)

    def to_json(self, step: Optional[int] = None) -> dict:
        rec = {"l_cc": float(self.l_cc.detach()), "l_sc": float(self.l_sc.detach()),
               "l_total": float(self.l_total.detach()), "pairs": dict(self.pairs)}
        if self.missing:
            rec["missing"] = list(self.missing)
        if step is not None:
            rec = {"step": step, **rec}
        return rec


def _check_unit(x: torch.Tensor, name: str):
    norms = x.detach().norm(dim=-1)
    if (norms - 1).abs().max() > NORM_TOL:
        raise ValueError(f"{name} embeddings are not unit-norm (max deviation "
                         f"{float((norms - 1).abs().max()):.2e})")


def info_nce(anchors: torch.Tensor, positives: torch.Tensor, config: LossConfig = None) -> torch.Tensor:
    """Mean over the batch of -log softmax(sim(a_b, p_.)/tau)[b]; positive included in the denominator."""
    config = config or LossConfig()
    if anchors.shape != positives.shape or anchors.ndim != 2:
        raise ValueError(f"shape mismatch {tuple(anchors.shape)} vs {tuple(positives.shape)}")
    if anchors.shape[0] < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    _check_unit(anchors, "anchor")
    _check_unit(positives, "positive")
    logits = anchors @ positives.T / config.temperature
    labels = torch.arange(len(anchors), device=anchors.device)
    loss = F.cross_entropy(logits, labels)
    if config.direction == "symmetric":
        loss = 0.5 * (loss + F.cross_entropy(logits.T, labels))
    return loss


def _scene_terms(f_d: Mapping[str, Optional[torch.Tensor]] | None):
    present, missing = {}, []
    for key in SCALE_KEYS:
        emb = None if f_d is None else f_d.get(key)
        if emb is None:
            missing.append(key)
        else:
            present[key] = emb
    return present, missing


def cross_view_loss(f_g, f_s, f_d, config: LossConfig = None):
    """Street-satellite term plus street-scene and satellite-scene terms per available scale.

    ``f_d`` maps "s1"/"s2"/"s3" to (B, D) tensors; a missing or ``None`` scale
    drops its two terms and is listed in the returned ``missing``.
    """
    config = config or LossConfig()
    present, missing = _scene_terms(f_d)
    terms = {"g<->s": info_nce(f_g, f_s, config)}
    for key, d in present.items():
        terms[f"g<->d_{key}"] = info_nce(f_g, d, config)
        terms[f"s<->d_{key}"] = info_nce(f_s, d, config)
    return sum(terms.values()), terms, [f"{k}-missing" for k in missing]


def self_supervised_loss(views_a: Mapping[str, torch.Tensor], views_b: Mapping[str, torch.Tensor],
                         config: LossConfig = None):
    """Intra-view terms: anchor = draw A, positive = draw B of the same images.

    Keys are "g", "s" and "d_s1".."d_s3"; absent or ``None`` entries are skipped.
    Passing the same tensors for both draws gives the identical-pair variant.
    """
    config = config or LossConfig()
    terms, missing = {}, []
    for key in ("g", "s", *(f"d_{k}" for k in SCALE_KEYS)):
        a, b = views_a.get(key), views_b.get(key)
        if a is None or b is None:
            missing.append(f"{key}-missing")
            continue
        terms[f"{key}<->{key}"] = info_nce(a, b, config)
    return sum(terms.values()), terms, missing


def total_loss(l_cc, l_sc, lam: float):
    return l_cc + lam * l_sc


def contrastive_objective(draw_a: Mapping[str, torch.Tensor], draw_b: Mapping[str, torch.Tensor],
                          config: LossConfig = None) -> LossReport:
    """Full objective from two augmentation draws keyed "g", "s", "d_s1".."d_s3".

    The cross-view part uses draw A. With lambda == 0 the self-supervised part
    is still reported but carries no gradient.
    """
    config = config or LossConfig()
    f_d = {k: draw_a.get(f"d_{k}") for k in SCALE_KEYS}
    l_cc, cc_terms, missing = cross_view_loss(draw_a["g"], draw_a["s"], f_d, config)
    if config.ssl_positives == "identical":
        draw_b = draw_a
    l_sc, sc_terms, _ = self_supervised_loss(draw_a, draw_b, config)
    if config.lam == 0:
        l_sc = l_sc.detach()
        l_total = l_cc
    else:
        l_total = total_loss(l_cc, l_sc, config.lam)
    pairs = {k: float(v.detach()) for k, v in {**cc_terms, **sc_terms}.items()}
    report = LossReport(l_cc, l_sc, l_total, pairs, missing)
    if not all(math.isfinite(float(v.detach())) for v in (l_cc, l_sc, l_total)):
        raise FloatingPointError(f"non-finite loss: {report.to_json()}")
    return report
