import numpy as np
import pytest
import torch

from fewseg.episodes import synth_generate


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Small deterministic shapes dataset shared across test modules."""
    root = tmp_path_factory.mktemp("synth")
    manifest = synth_generate(
        seed=11, n_classes=8, n_images_per_class=4, image_size=64, output_dir=root
    )
    return manifest


def max_rel_error_fd(build_loss, parameters, eps=1e-5, max_per_param=None, seed=0):
    """Max relative error between analytic grads and central finite differences.

    ``build_loss`` must rebuild the scalar loss from scratch on every call.
    Entries where both gradients are below 1e-9 are treated as agreeing.
    """
    params = [p for p in parameters if p.requires_grad]
    for p in params:
        if p.grad is not None:
            p.grad = None
    build_loss().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga = grad.reshape(-1)
        n = flat.numel()
        if max_per_param is None or n <= max_per_param:
            indices = range(n)
        else:
            indices = sorted(rng.choice(n, size=max_per_param, replace=False).tolist())
        for i in indices:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                plus = float(build_loss())
                flat[i] = orig - eps
                minus = float(build_loss())
                flat[i] = orig
            fd = (plus - minus) / (2.0 * eps)
            a = float(ga[i])
            scale = max(abs(a), abs(fd))
            if scale < 1e-9:
                continue
            worst = max(worst, abs(a - fd) / scale)
    return worst
