"""Central-finite-difference verification of reverse-mode gradients."""

from dataclasses import dataclass, field

import numpy as np

from .engine import backward


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_param: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def __str__(self):
        lines = [f"grad_check: {'PASS' if self.passed else 'FAIL'} (max rel err {self.max_rel_err:.3e})"]
        for pid, err in sorted(self.per_param.items()):
            flag = "FAIL" if pid in self.failures else "ok"
            lines.append(f"  {pid}: {err:.3e} [{flag}]")
        return "\n".join(lines)


def grad_check(lossfn, params, step=1e-5, rtol=1e-4, max_coords=None, rng=None):
    """Compare reverse-mode gradients of ``lossfn()`` against central differences.

    ``lossfn`` must build a fresh scalar loss node from the current values of
    ``params`` and be deterministic (freeze any sampling noise first). With
    ``max_coords`` set, only that many randomly chosen coordinates per
    parameter are probed, bounding the cost on large parameter tensors.
    """
    loss = lossfn()
    loss2 = lossfn()
    if not np.allclose(loss.value, loss2.value, rtol=0, atol=0):
        raise ValueError(
            "lossfn is not deterministic under fixed inputs: "
            f"{float(loss.value)!r} != {float(loss2.value)!r}"
        )
    grads = backward(loss, params=params)

    rng = rng or np.random.default_rng(0)
    per_param = {}
    failures = []
    for p in params:
        if not p.trainable:
            continue
        flat = p.value.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        g = grads[p.id].reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = float(lossfn().value)
            flat[i] = orig - step
            down = float(lossfn().value)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            denom = max(abs(fd), abs(g[i]), 1e-8)
            worst = max(worst, abs(fd - g[i]) / denom)
        per_param[p.id] = worst
        if worst > rtol:
            failures.append(p.id)
    max_err = max(per_param.values(), default=0.0)
    return GradCheckReport(passed=not failures, max_rel_err=max_err,
                           per_param=per_param, failures=failures)
