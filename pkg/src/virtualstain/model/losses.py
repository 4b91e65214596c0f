"""Conditional adversarial objective with an L1 reconstruction term."""

from __future__ import annotations

import torch
import torch.nn.functional as F


def bce_logits(scores: torch.Tensor, target: float) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(scores, torch.full_like(scores, target))


def l1_term(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(generated - target))


def discriminator_loss(d_real_scores: torch.Tensor, d_fake_scores: torch.Tensor) -> torch.Tensor:
    return 0.5 * (bce_logits(d_real_scores, 1.0) + bce_logits(d_fake_scores, 0.0))


def generator_loss(generated: torch.Tensor, target: torch.Tensor, d_fake_scores: torch.Tensor,
                   lambda_l1: float) -> torch.Tensor:
    return bce_logits(d_fake_scores, 1.0) + lambda_l1 * l1_term(generated, target)


def loss_terms(input, target, generated, d_real_scores, d_fake_scores, lambda_l1: float):
    """Return ``(g_loss, d_loss)``.

    ``d_loss = 0.5 * [BCE(D(x, y), 1) + BCE(D(x, G(x)), 0)]`` and
    ``g_loss = BCE(D(x, G(x)), 1) + lambda_l1 * mean|G(x) - y|``. Scores are
    logits. ``input`` is accepted for signature symmetry; conditioning enters
    through the scores.
    """
    del input
    g_loss = generator_loss(generated, target, d_fake_scores, lambda_l1)
    d_loss = discriminator_loss(d_real_scores, d_fake_scores)
    return g_loss, d_loss
