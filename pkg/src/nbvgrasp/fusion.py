"""Uncertainty-guided multi-view grasp fusion.

Grasp observations from successive views are folded into a persistent
buffer of contact grasps.  Each grasp keeps a directional belief over
its baseline direction as a von Mises-Fisher distribution stored in
natural-parameter form (eta = kappa * mu accumulated additively), so
batch and one-by-one fusion agree exactly and concordant evidence
raises the concentration while discordant evidence deflates it.  A
parallel plain sum of kappas is kept for the additive reporting mode.

An incoming observation near an existing grasp (contact within gamma_d,
baseline cosine-distance within gamma_theta) refines that grasp;
everything else is clustered by contact density and enters the buffer
as new grasps.  Grasp executability is judged by quality and
concentration thresholds plus the planner's field stagnation signal.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass

import numpy as np

from .geom import as_vec3

DEFAULT_STALE_TICKS = 50
FLAT_KAPPA_TOL = 1e-12


class TerminationDecision(enum.Enum):
    EXECUTE = "execute"
    CONTINUE = "continue"
    REPRIORITIZE = "reprioritize"


@dataclass(frozen=True)
class FusionConfig:
    """Thresholds and modes for grasp fusion.

    kappa_mode selects how a grasp's concentration is reported:
    "natural" uses the length of the accumulated natural parameter
    (discordant evidence deflates it), "additive" uses the plain sum of
    observation kappas.  theta_gate selects which baselines may fuse:
    "similar" fuses directions with cosine-distance below gamma_theta,
    "dissimilar" fuses the complement.  quality_fusion picks the fused
    quality: "weighted" (quality-weighted mean of qualities) or "max".
    """

    gamma_d: float = 0.03
    gamma_theta: float = 0.3
    q_max: float = 0.85
    kappa_max: float = 50.0
    dbscan_eps: float = 0.02
    dbscan_min_pts: int = 1
    k_bins: int = 6
    kappa_mode: str = "natural"
    theta_gate: str = "similar"
    quality_fusion: str = "weighted"

    def __post_init__(self):
        for name in ("gamma_d", "gamma_theta", "kappa_max", "dbscan_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.q_max < 1.0:
            raise ValueError("q_max must lie in (0, 1)")
        if self.dbscan_min_pts < 1:
            raise ValueError("dbscan_min_pts must be >= 1")
        if self.k_bins < 1:
            raise ValueError("k_bins must be >= 1")
        if self.kappa_mode not in ("natural", "additive"):
            raise ValueError("kappa_mode must be 'natural' or 'additive'")
        if self.theta_gate not in ("similar", "dissimilar"):
            raise ValueError("theta_gate must be 'similar' or 'dissimilar'")
        if self.quality_fusion not in ("weighted", "max"):
            raise ValueError("quality_fusion must be 'weighted' or 'max'")


@dataclass(frozen=True, eq=False)
class GraspObservation:
    """One grasp hypothesis from the current view."""

    contact: np.ndarray
    mu: np.ndarray
    kappa: float
    approach_bins: np.ndarray
    width: float
    quality: float
    tick: int = 0

    def __post_init__(self):
        object.__setattr__(self, "contact", as_vec3(self.contact))
        mu = as_vec3(self.mu)
        if abs(float(np.linalg.norm(mu)) - 1.0) > 1e-9:
            raise ValueError("mu must be a unit vector")
        object.__setattr__(self, "mu", mu)
        if not (np.isfinite(self.kappa) and self.kappa > 0):
            raise ValueError("kappa must be finite and positive")
        bins = np.asarray(self.approach_bins, dtype=np.float64)
        if bins.ndim != 1 or np.any(bins < 0):
            raise ValueError("approach_bins must be non-negative reals")
        object.__setattr__(self, "approach_bins", bins)
        if self.width < 0:
            raise ValueError("width must be >= 0")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError("quality must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class ContactGrasp:
    """One fused grasp in the buffer.

    eta is the natural parameter of the baseline belief (sum of
    kappa * mu over everything fused in); kappa_sum is the plain sum of
    those kappas for the additive reporting mode.
    """

    contact: np.ndarray
    eta: np.ndarray
    kappa_sum: float
    approach_bins: np.ndarray
    width: float
    quality: float
    update_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "contact", as_vec3(self.contact))
        object.__setattr__(self, "eta", as_vec3(self.eta))
        bins = np.asarray(self.approach_bins, dtype=np.float64)
        if np.any(bins < 0):
            raise ValueError("approach_bins must be non-negative")
        object.__setattr__(self, "approach_bins", bins)
        if self.update_count < 1:
            raise ValueError("update_count must be >= 1")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError("quality must lie in [0, 1]")

    @property
    def kappa_natural(self) -> float:
        return float(np.linalg.norm(self.eta))

    @property
    def mu(self) -> np.ndarray | None:
        k = self.kappa_natural
        if k <= FLAT_KAPPA_TOL:
            return None
        return self.eta / k

    def kappa(self, mode: str = "natural") -> float:
        if mode == "natural":
            return self.kappa_natural
        if mode == "additive":
            return float(self.kappa_sum)
        raise ValueError(f"unknown kappa mode {mode!r}")


def vmf_density(b, mu, kappa: float) -> float:
    """von Mises-Fisher density on the unit sphere.

    Normalization kappa / (4 pi sinh kappa), evaluated in the
    overflow-free form kappa * exp(kappa (t - 1)) / (2 pi (1 - exp(-2 kappa)))
    with t = mu . b; the kappa -> 0 limit is the uniform density.
    """
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    t = float(np.clip(as_vec3(mu) @ as_vec3(b), -1.0, 1.0))
    if kappa < 1e-12:
        return 1.0 / (4.0 * np.pi)
    return float(kappa * np.exp(kappa * (t - 1.0)) / (2.0 * np.pi * (-np.expm1(-2.0 * kappa))))


def _gate(grasp: ContactGrasp, obs: GraspObservation, cfg: FusionConfig) -> bool:
    if float(np.linalg.norm(grasp.contact - obs.contact)) >= cfg.gamma_d:
        return False
    mu = grasp.mu
    if mu is None:
        return True  # no directional belief yet: contact gate decides
    cos_dist = 1.0 - float(mu @ obs.mu)
    if cfg.theta_gate == "similar":
        return cos_dist < cfg.gamma_theta
    return cos_dist > cfg.gamma_theta


def categorize(
    grasps: dict[int, ContactGrasp],
    incoming: list[GraspObservation],
    cfg: FusionConfig,
) -> tuple[dict[int, int], list[GraspObservation]]:
    """Split observations into proximal (mapped to a buffer grasp) and new.

    An observation is proximal to a grasp when its contact lies within
    gamma_d of the grasp contact and the baseline passes the cosine
    gate; among several qualifying grasps the nearest contact wins, ties
    going to the lower grasp id.  Returns (obs index -> grasp id, rest).
    """
    assignments: dict[int, int] = {}
    new: list[GraspObservation] = []
    ids = sorted(grasps)
    for j, obs in enumerate(incoming):
        best_id = None
        best_key = None
        for gid in ids:
            if not _gate(grasps[gid], obs, cfg):
                continue
            dist = float(np.linalg.norm(grasps[gid].contact - obs.contact))
            key = (dist, gid)
            if best_key is None or key < best_key:
                best_id = gid
                best_key = key
        if best_id is None:
            new.append(obs)
        else:
            assignments[j] = best_id
    return assignments, new


def fuse_cluster(prior: ContactGrasp | None, obs: list[GraspObservation], cfg: FusionConfig) -> ContactGrasp:
    """Fuse observations into a prior grasp (None = flat prior).

    Contact and width are quality-weighted means over the prior and the
    observations (equal weights if every quality is zero); the baseline
    belief adds natural parameters; approach bins add element-wise;
    quality follows cfg.quality_fusion; the update count grows by the
    number of observations.
    """
    if not obs:
        raise ValueError("fuse_cluster needs at least one observation")
    k = len(obs[0].approach_bins)
    if prior is not None and len(prior.approach_bins) != k:
        raise ValueError("approach bin counts differ")

    contacts = [o.contact for o in obs]
    widths = [o.width for o in obs]
    qualities = [o.quality for o in obs]
    if prior is not None:
        contacts = [prior.contact] + contacts
        widths = [prior.width] + widths
        qualities = [prior.quality] + qualities
    weights = np.asarray(qualities, dtype=np.float64)
    if float(weights.sum()) <= 0.0:
        weights = np.ones_like(weights)
    weights = weights / weights.sum()
    contact = np.asarray(contacts).T @ weights
    width = float(np.asarray(widths) @ weights)
    if cfg.quality_fusion == "max":
        quality = float(max(qualities))
    else:
        quality = float(np.asarray(qualities) @ weights)
    quality = min(max(quality, 0.0), 1.0)

    eta = np.zeros(3) if prior is None else prior.eta.copy()
    kappa_sum = 0.0 if prior is None else float(prior.kappa_sum)
    bins = np.zeros(k) if prior is None else prior.approach_bins.copy()
    for o in obs:
        if len(o.approach_bins) != k:
            raise ValueError("approach bin counts differ")
        eta = eta + o.kappa * o.mu
        kappa_sum += o.kappa
        bins = bins + o.approach_bins

    count = len(obs) if prior is None else prior.update_count + len(obs)
    return ContactGrasp(
        contact=contact,
        eta=eta,
        kappa_sum=kappa_sum,
        approach_bins=bins,
        width=width,
        quality=quality,
        update_count=count,
    )


def _dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering; returns labels (-1 = noise)."""
    n = points.shape[0]
    labels = np.full(n, -2)  # -2 unvisited, -1 noise
    if n == 0:
        return labels
    dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    neighborhoods = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    cluster = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if len(neighborhoods[i]) < min_pts:
            labels[i] = -1
            continue
        labels[i] = cluster
        seeds = list(neighborhoods[i])
        pos = 0
        while pos < len(seeds):
            j = seeds[pos]
            pos += 1
            if labels[j] == -1:
                labels[j] = cluster  # border point reached from a core
            if labels[j] != -2:
                continue
            labels[j] = cluster
            if len(neighborhoods[j]) >= min_pts:
                seeds.extend(neighborhoods[j])
        cluster += 1
    return labels


def self_fuse(new_obs: list[GraspObservation], cfg: FusionConfig) -> list[ContactGrasp]:
    """Cluster unmatched observations by contact density and fuse each
    cluster onto a flat prior; noise points become singleton grasps."""
    if not new_obs:
        return []
    points = np.asarray([o.contact for o in new_obs])
    labels = _dbscan(points, cfg.dbscan_eps, cfg.dbscan_min_pts)
    fused: list[ContactGrasp] = []
    seen: list[int] = []
    for lbl in labels:
        if lbl >= 0 and lbl not in seen:
            seen.append(lbl)
            members = [o for o, l in zip(new_obs, labels) if l == lbl]
            fused.append(fuse_cluster(None, members, cfg))
    for o, lbl in zip(new_obs, labels):
        if lbl == -1:
            fused.append(fuse_cluster(None, [o], cfg))
    return fused


@dataclass(frozen=True)
class TerminationVerdict:
    decision: TerminationDecision
    criterion: str  # "i" | "ii" | "iii" | "none"
    grasp_id: int | None = None


class FusionEngine:
    """Single-writer grasp buffer with thread-safe queries.

    ingest() is the only mutator and is serialized by an internal lock;
    best_grasp() and evaluate_termination() read a consistent snapshot
    and may run concurrently with each other.
    """

    def __init__(self, cfg: FusionConfig | None = None, stale_ticks: int = DEFAULT_STALE_TICKS):
        self.cfg = cfg if cfg is not None else FusionConfig()
        self.stale_ticks = int(stale_ticks)
        self._lock = threading.Lock()
        self._grasps: dict[int, ContactGrasp] = {}
        self._last_seen: dict[int, int] = {}
        self._next_id = 0

    def grasps(self) -> dict[int, ContactGrasp]:
        """Snapshot of the buffer (grasp values are immutable)."""
        with self._lock:
            return dict(self._grasps)

    def __len__(self) -> int:
        with self._lock:
            return len(self._grasps)

    def ingest(self, observations: list[GraspObservation], tick: int | None = None) -> None:
        """Fold one view's grasp observations into the buffer.

        Observations are pre-sorted by (tick, contact) so the result
        does not depend on the caller's ordering.  Grasps seen exactly
        once and not re-observed within stale_ticks are dropped.
        """
        with self._lock:
            if tick is None:
                tick = max((o.tick for o in observations), default=0)
            ordered = sorted(
                observations, key=lambda o: (o.tick, tuple(o.contact), tuple(o.mu))
            )
            assignments, new = categorize(self._grasps, ordered, self.cfg)
            by_grasp: dict[int, list[GraspObservation]] = {}
            for j, gid in assignments.items():
                by_grasp.setdefault(gid, []).append(ordered[j])
            for gid in sorted(by_grasp):
                self._grasps[gid] = fuse_cluster(self._grasps[gid], by_grasp[gid], self.cfg)
                self._last_seen[gid] = tick
            for grasp in self_fuse(new, self.cfg):
                gid = self._next_id
                self._next_id += 1
                self._grasps[gid] = grasp
                self._last_seen[gid] = tick
            stale = [
                gid
                for gid, grasp in self._grasps.items()
                if grasp.update_count == 1
                and tick - self._last_seen[gid] > self.stale_ticks
            ]
            for gid in stale:
                del self._grasps[gid]
                del self._last_seen[gid]

    def best_grasp(self, within=None) -> tuple[int, float, float] | None:
        """(id, quality, kappa) of the best grasp, or None if empty.

        Highest quality wins; ties prefer the larger kappa, then the
        lower id.  `within` optionally restricts candidates to grasps
        whose contact lies inside the given box.
        """
        with self._lock:
            items = list(self._grasps.items())
        if within is not None:
            items = [(gid, g) for gid, g in items if within.contains(g.contact)]
        if not items:
            return None
        mode = self.cfg.kappa_mode
        gid, grasp = min(items, key=lambda kv: (-kv[1].quality, -kv[1].kappa(mode), kv[0]))
        return gid, grasp.quality, grasp.kappa(mode)

    def evaluate_termination(
        self, field_speed: float, eps_stag: float = 1e-3, within=None
    ) -> TerminationVerdict:
        """Decide whether to execute the best grasp, keep exploring, or
        fall back to removing obstructions.

        Execute when the best grasp clears both the quality and the
        concentration bars; at field stagnation execute on quality
        alone, otherwise reprioritize; in all other states continue.
        """
        best = self.best_grasp(within=within)
        if best is not None:
            gid, q, k = best
            if q > self.cfg.q_max and k > self.cfg.kappa_max:
                return TerminationVerdict(TerminationDecision.EXECUTE, "ii", gid)
        if field_speed < eps_stag:
            if best is not None and best[1] > self.cfg.q_max:
                return TerminationVerdict(TerminationDecision.EXECUTE, "iii", best[0])
            return TerminationVerdict(TerminationDecision.REPRIORITIZE, "iii", None)
        return TerminationVerdict(TerminationDecision.CONTINUE, "none", None)
