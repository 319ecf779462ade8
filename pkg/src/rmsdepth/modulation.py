"""Fusion operators that do not scan: FiLM and the pre-scan blend ablation arm."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError


@dataclass
class FilmParams:
    W_gamma: np.ndarray  # [D, D], bias-free
    W_beta: np.ndarray  # [D, D], bias-free

    @classmethod
    def init(cls, d: int) -> "FilmParams":
        return cls(W_gamma=np.zeros((d, d)), W_beta=np.zeros((d, d)))


@dataclass
class PreScanFusionParams:
    W_conf: np.ndarray  # [1, D], bias-free
    W_mix: np.ndarray  # [D, 2D], zero at init

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> "PreScanFusionParams":
        return cls(
            W_conf=rng.normal(0.0, 1.0 / np.sqrt(d), (1, d)),
            W_mix=np.zeros((d, 2 * d)),
        )


def _check(img, rad):
    if img.shape != rad.shape:
        raise ShapeError(f"image {img.shape} and radar {rad.shape} features differ in shape")


def film(p: dict, img: ad.Var, rad: ad.Var) -> ad.Var:
    """``(1 + W_gamma rad) * img + W_beta rad`` over the last axis."""
    _check(img, rad)
    gamma = ad.linear(rad, p["W_gamma"])
    beta = ad.linear(rad, p["W_beta"])
    return img * (gamma + 1.0) + beta


def pre_scan_blend(p: dict, img: ad.Var, rad: ad.Var) -> ad.Var:
    """Confidence-gated residual blend of concatenated image and radar features."""
    _check(img, rad)
    conf = ad.sigmoid(ad.linear(rad, p["W_conf"]))
    mix = ad.linear(ad.concat([img, rad], axis=-1), p["W_mix"])
    return img + conf * mix


def film_flops_per_pixel(d: int) -> int:
    """Multiply-adds per pixel for one FiLM application (two D×D maps plus the affine)."""
    return 2 * d * d + 2 * d
