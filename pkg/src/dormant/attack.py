"""Backdoor re-activation attacks.

All three attacks search for one universal perturbation ``delta`` that is added
to already-triggered images so that a defended model predicts the target class
again:

* :func:`wba_pgd` -- white-box projected gradient descent,
* :func:`bba_square` -- score-only random search (universal square attack),
* :func:`ta_ensemble` -- PGD on a sum of surrogate models, transferred to an unseen model.
"""

from __future__ import annotations

import csv
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import InvalidInputError

LOG_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class PerturbationBudget:
    norm: float = math.inf
    radius: float = 0.05

    def __post_init__(self):
        if self.norm not in (2, math.inf):
            raise InvalidInputError(f"unsupported norm {self.norm}; use 2 or inf")
        if self.radius < 0:
            raise InvalidInputError("radius must be non-negative")

    @classmethod
    def parse(cls, norm, radius) -> "PerturbationBudget":
        if isinstance(norm, str):
            norm = math.inf if norm.lower() in ("inf", "linf", "infinity") else float(norm)
        return cls(float(norm), float(radius))

    def size(self, delta: torch.Tensor) -> float:
        if self.norm == math.inf:
            return delta.abs().max().item()
        return delta.norm().item()


def project(delta: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    """Euclidean projection of ``delta`` onto the budget ball."""
    if budget.norm == math.inf:
        return delta.clamp(-budget.radius, budget.radius)
    n = delta.norm()
    if n > budget.radius:
        out = delta * (budget.radius / n)
        # guard against round-up past the radius
        while out.norm() > budget.radius:
            out = out * (1 - 1e-7)
        return out
    return delta


def perturb(x: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    return (x + delta).clamp(0, 1)


def _loss_from_logits(z: torch.Tensor, target: int, lam: float) -> torch.Tensor:
    log_p = F.log_softmax(z, dim=1)
    ce = -log_p[:, target]
    others = torch.cat([z[:, :target], z[:, target + 1:]], dim=1)
    # log(1 - p_j) for the strongest non-target class j, computed without cancellation
    j = others.argmax(dim=1, keepdim=True)
    j = j + (j >= target).long()
    keep = torch.ones_like(z, dtype=torch.bool).scatter_(1, j, False)
    log_rest = torch.logsumexp(z.masked_fill(~keep, -math.inf), dim=1) - torch.logsumexp(z, dim=1)
    return (ce - lam * log_rest.clamp(min=LOG_FLOOR)).sum()


def _loss_from_scores(p: torch.Tensor, target: int, lam: float) -> float:
    p = p.double()
    ce = -torch.log(p[:, target].clamp(min=1e-12))
    others = torch.cat([p[:, :target], p[:, target + 1:]], dim=1)
    rest = (1 - others.max(dim=1).values).clamp(min=1e-12)
    return (ce - lam * torch.log(rest)).sum().item()


def loss_total(model, x_poisoned: torch.Tensor, delta: torch.Tensor, target: int, lam: float = 1.0):
    """Re-activation objective summed over a batch of triggered images.

    ``CE(f(x + delta), t) - lam * log(1 - max_{k != t} softmax_k)``. With a
    differentiable ``model`` the result is a scalar tensor carrying gradients;
    with a :class:`QueryOracle` it is a float computed from returned scores.
    """
    if lam < 0:
        raise InvalidInputError("lambda must be non-negative")
    x = perturb(x_poisoned, delta)
    if isinstance(model, QueryOracle):
        return _loss_from_scores(model.scores(x), target, lam)
    z = model(x)
    if not torch.isfinite(z).all():
        raise FloatingPointError("model produced non-finite logits")
    return _loss_from_logits(z, target, lam)


class QueryOracle:
    """Score-only access to a model with per-image query accounting.

    ``noise`` > 0 emulates an adaptive defender that adds uniform noise in
    ``[-noise, noise]`` to every queried image.
    """

    def __init__(self, model, noise: float = 0.0, seed: int = 0, batch_size: int = 1000):
        self._model = model
        self.noise = noise
        self.batch_size = batch_size
        self._gen = torch.Generator().manual_seed(seed)
        self._lock = threading.Lock()
        self.queries = 0

    @torch.no_grad()
    def scores(self, x: torch.Tensor) -> torch.Tensor:
        if self.noise > 0:
            with self._lock:
                eps = torch.rand(x.shape, generator=self._gen) * 2 - 1
            x = (x + self.noise * eps).clamp(0, 1)
        if hasattr(self._model, "eval"):
            self._model.eval()
        out = torch.cat([F.softmax(self._model(x[i:i + self.batch_size]), dim=1)
                         for i in range(0, len(x), self.batch_size)])
        with self._lock:
            self.queries += len(x)
        return out

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        return self.scores(x).argmax(dim=1)


@dataclass
class AttackResult:
    delta: torch.Tensor
    mode: str
    budget: PerturbationBudget
    train_asr: float
    losses: list[float] = field(default_factory=list)
    asrs: list[float] = field(default_factory=list)
    queries: list[int] = field(default_factory=list)
    total_queries: int = 0
    queries_per_image: float = 0.0
    test_asr: float | None = None
    wall_clock: float = 0.0
    flags: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def best_loss(self):
        return self.losses[-1] if self.mode == "bba" else min(self.losses)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "norm": "inf" if self.budget.norm == math.inf else self.budget.norm,
            "radius": self.budget.radius,
            "delta_norm": self.budget.size(self.delta),
            "train_asr": self.train_asr,
            "test_asr": self.test_asr,
            "best_loss": self.best_loss,
            "iterations": len(self.losses),
            "total_queries": self.total_queries,
            "queries_per_image": self.queries_per_image,
            "wall_clock": self.wall_clock,
            "flags": self.flags,
            "meta": self.meta,
        }

    def save(self, directory, stem="attack"):
        """JSON summary, raw ``delta`` tensor and a CSV loss trajectory."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2))
        np.save(directory / f"{stem}_delta.npy", self.delta.numpy())
        with open(directory / f"{stem}_trajectory.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "asr", "queries"])
            for i, loss in enumerate(self.losses):
                asr = self.asrs[i] if i < len(self.asrs) else ""
                q = self.queries[i] if i < len(self.queries) else 0
                w.writerow([i, repr(loss), asr, q])

    @classmethod
    def load(cls, directory, stem="attack") -> "AttackResult":
        directory = Path(directory)
        d = json.loads((directory / f"{stem}.json").read_text())
        losses, asrs, queries = [], [], []
        with open(directory / f"{stem}_trajectory.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                losses.append(float(row["loss"]))
                if row["asr"] != "":
                    asrs.append(float(row["asr"]))
                queries.append(int(row["queries"]))
        return cls(
            delta=torch.from_numpy(np.load(directory / f"{stem}_delta.npy")),
            mode=d["mode"],
            budget=PerturbationBudget.parse(d["norm"], d["radius"]),
            train_asr=d["train_asr"],
            losses=losses,
            asrs=asrs,
            queries=queries,
            total_queries=d["total_queries"],
            queries_per_image=d["queries_per_image"],
            test_asr=d["test_asr"],
            wall_clock=d["wall_clock"],
            flags=d["flags"],
            meta=d["meta"],
        )


def _asr(model, x, delta, target):
    with torch.no_grad():
        return (model(perturb(x, delta)).argmax(dim=1) == target).float().mean().item()


def _pgd(objective, models, x, target, budget, steps, step_size, mode, init=None):
    start = time.perf_counter()
    for m in models:
        m.eval()
    delta = torch.zeros(x.shape[1:]) if init is None else project(init.clone(), budget)
    best_delta, best_loss = delta.clone(), math.inf
    losses, asrs = [], []
    nonzero_grad = False
    for step in range(steps + 1):
        delta.requires_grad_(True)
        loss = objective(delta)
        grad = torch.autograd.grad(loss, delta, allow_unused=True)[0] if loss.requires_grad else None
        if grad is None:
            grad = torch.zeros_like(delta)
        delta = delta.detach()
        value = loss.item()
        losses.append(value)
        asrs.append(_asr(models[0], x, delta, target))
        if value < best_loss:
            best_loss, best_delta = value, delta.clone()
        if step == steps or budget.radius == 0:
            break
        if budget.norm == math.inf:
            g = grad.sign()
        else:
            g = grad / grad.norm() if grad.norm() > 0 else grad
        if grad.abs().max() > 0:
            nonzero_grad = True
        delta = project(delta - step_size * g, budget)
    flags = [] if nonzero_grad or budget.radius == 0 else ["stagnated"]
    if not nonzero_grad:
        best_delta = torch.zeros_like(best_delta)
    return AttackResult(
        delta=best_delta,
        mode=mode,
        budget=budget,
        train_asr=_asr(models[0], x, best_delta, target),
        losses=losses,
        asrs=asrs,
        wall_clock=time.perf_counter() - start,
        flags=flags,
        meta={"steps": steps, "step_size": step_size, "best_iterate": True},
    )


def default_step_size(budget: PerturbationBudget, steps: int) -> float:
    return 2.5 * budget.radius / max(steps, 1)


def wba_pgd(model, x_poisoned: torch.Tensor, target: int, budget=PerturbationBudget(),
            lam: float = 1.0, steps: int = 100, step_size: float | None = None, init=None) -> AttackResult:
    """White-box re-activation: PGD on the summed objective, returning the best iterate.

    ``x_poisoned`` holds the attacker's triggered images. Signed-gradient steps
    are used for the inf-norm, normalized-gradient steps for the 2-norm.
    """
    if len(x_poisoned) == 0:
        raise InvalidInputError("attacker subset is empty")
    step_size = step_size or default_step_size(budget, steps)
    return _pgd(lambda d: loss_total(model, x_poisoned, d, target, lam), [model], x_poisoned,
                target, budget, steps, step_size, "wba", init)


def ensemble_loss(models, x_poisoned, delta, target, lam=1.0):
    total = loss_total(models[0], x_poisoned, delta, target, lam)
    for m in models[1:]:
        total = total + loss_total(m, x_poisoned, delta, target, lam)
    return total


def ta_ensemble(surrogates, x_poisoned: torch.Tensor, target: int, budget=PerturbationBudget(2, 1.0),
                lam: float = 1.0, steps: int = 100, step_size: float | None = None) -> AttackResult:
    """Transfer attack: PGD against the sum of surrogate objectives (surrogate index order)."""
    if len(surrogates) == 0:
        raise InvalidInputError("need at least one surrogate model")
    if len(x_poisoned) == 0:
        raise InvalidInputError("attacker subset is empty")
    step_size = step_size or default_step_size(budget, steps)
    res = _pgd(lambda d: ensemble_loss(surrogates, x_poisoned, d, target, lam), list(surrogates),
               x_poisoned, target, budget, steps, step_size, "ta")
    res.meta["surrogates"] = len(surrogates)
    return res


# -- universal square attack ---------------------------------------------------


def side_length_schedule(iterations: int, area: int, p_init: float = 0.1, milestones: int = 10):
    """Square side length per iteration; the covered area fraction halves at geometric milestones."""
    marks = np.geomspace(max(iterations / 1000, 1), iterations, milestones + 1)[:-1]

    def side(i):
        frac = p_init / 2 ** int(np.sum(i >= marks))
        return max(1, int(round(math.sqrt(frac * area))))

    return side


def stripe_init(shape, budget: PerturbationBudget, gen: torch.Generator) -> torch.Tensor:
    c, h, w = shape
    signs = torch.randint(0, 2, (c, 1, w), generator=gen).float() * 2 - 1
    delta = signs.expand(c, h, w).clone()
    if budget.norm == math.inf:
        return delta * budget.radius
    return project(delta * budget.radius / delta.norm(), budget)


def propose(delta: torch.Tensor, budget: PerturbationBudget, side: int, gen: torch.Generator) -> torch.Tensor:
    """Resample one randomly placed square of ``delta``.

    inf-norm: each channel of the square becomes a uniformly chosen +-radius.
    2-norm: the square receives the mass left over by the rest of ``delta``,
    spread as a per-channel signed constant, so the total norm equals the radius.
    """
    c, h, w = delta.shape
    side = min(side, h, w)
    r = int(torch.randint(0, h - side + 1, (1,), generator=gen))
    s = int(torch.randint(0, w - side + 1, (1,), generator=gen))
    new = delta.clone()
    signs = (torch.randint(0, 2, (c, 1, 1), generator=gen).float() * 2 - 1)
    if budget.norm == math.inf:
        new[:, r:r + side, s:s + side] = signs * budget.radius
        return new
    window = torch.zeros(h, w, dtype=torch.bool)
    window[r:r + side, s:s + side] = True
    outside = delta[:, ~window].norm() ** 2
    room = max(budget.radius**2 - outside.item(), 0.0)
    fill = signs.expand(c, side, side)
    new[:, r:r + side, s:s + side] = fill * math.sqrt(room) / fill.norm()
    return project(new, budget)


def bba_square(oracle: QueryOracle, x_poisoned: torch.Tensor, target: int, budget=PerturbationBudget(),
               iterations: int = 1000, eps: float = 0.01, lam: float = 1.0, seed: int = 0,
               query_budget: int = 10_000, init: str = "stripes") -> AttackResult:
    """Score-only random search for a universal perturbation.

    ``query_budget`` is per attacker image; one candidate evaluation costs one
    query for every image in ``x_poisoned``. A candidate is kept only if it
    strictly lowers the summed objective; the search stops early once the
    attacker-subset ASR exceeds ``1 - eps``.
    """
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    if not 0 < eps < 1:
        raise InvalidInputError("eps must lie in (0, 1)")
    if len(x_poisoned) == 0:
        raise InvalidInputError("attacker subset is empty")
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(seed)
    b = len(x_poisoned)
    limit = query_budget * b
    q0 = oracle.queries
    shape = tuple(x_poisoned.shape[1:])
    if init == "stripes" and budget.radius > 0:
        delta = stripe_init(shape, budget, gen)
    else:
        delta = torch.zeros(shape)

    def evaluate(d):
        p = oracle.scores(perturb(x_poisoned, d))
        return _loss_from_scores(p, target, lam), (p.argmax(dim=1) == target).float().mean().item()

    best, asr = evaluate(delta)
    losses, asrs, queries = [best], [asr], [oracle.queries - q0]
    side_of = side_length_schedule(iterations, shape[1] * shape[2])
    flags = []
    for i in range(iterations):
        if asr > 1 - eps:
            flags.append("early_exit")
            break
        if oracle.queries - q0 + b > limit:
            flags.append("budget_exhausted")
            break
        cand = propose(delta, budget, side_of(i), gen)
        loss, cand_asr = evaluate(cand)
        if loss < best:
            delta, best, asr = cand, loss, cand_asr
            losses.append(best)
            asrs.append(asr)
            queries.append(oracle.queries - q0)
    used = oracle.queries - q0
    return AttackResult(
        delta=delta,
        mode="bba",
        budget=budget,
        train_asr=asr,
        losses=losses,
        asrs=asrs,
        queries=queries,
        total_queries=used,
        queries_per_image=used / b,
        wall_clock=time.perf_counter() - start,
        flags=flags,
        meta={"iterations": iterations, "eps": eps, "seed": seed, "init": init,
              "asr_measured_on": "attacker subset"},
    )


def oracle_asr(oracle: QueryOracle, x_triggered: torch.Tensor, delta: torch.Tensor, target: int) -> float:
    return (oracle.predict(perturb(x_triggered, delta)) == target).float().mean().item()
