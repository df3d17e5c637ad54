import numpy as np


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update per parameter; gradients are zeroed after."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    for p in params:
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
        p.m = p.m.astype(p.data.dtype, copy=False)
        p.v = p.v.astype(p.data.dtype, copy=False)
        p.zero_grad()
