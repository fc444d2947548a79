"""Shared numerical oracles for the test-suite."""

import torch


def fd_gradient(fn, x, h=1e-6):
    """Central finite-difference gradient of scalar ``fn`` at float64 ``x``."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def autograd_gradient(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def gradient_rel_error(fn, x, h=1e-6):
    """Norm-wise relative error between autograd and central differences."""
    ga = autograd_gradient(fn, x)
    gf = fd_gradient(fn, x, h)
    scale = max(float(ga.norm()), float(gf.norm()), 1e-12)
    return float((ga - gf).norm()) / scale
