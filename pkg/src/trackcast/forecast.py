"""Forecasting head: conditional variational trajectory generator, a learned
latent sampler, and determinantal-point-process diversity machinery.

Trajectories live in the ground plane as (x, z) pairs. Inside the networks a
trajectory of T steps is a flat row ``[x1, z1, x2, z2, ...]`` expressed
relative to the agent's last observed position.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .layers import init_mlp, mlp, mlp_depth

POS_SCALE = 10.0
IID = "iid"
LEARNED = "learned_sampler"
GREEDY = "greedy_map_over_iid"
MODES = (IID, LEARNED, GREEDY)


@dataclass
class DppParams:
    sigma_d: float = 2.0
    rho: float = 1.0
    R: float | None = None      # defaults to 2 * sqrt(Z)

    def radius(self, Z: int) -> float:
        return 2.0 * math.sqrt(Z) if self.R is None else self.R


@dataclass
class TrajectorySet:
    trajectories: np.ndarray     # (K, T, 2) absolute ground-plane positions
    codes: np.ndarray            # (K, Z)
    context: np.ndarray          # (C,)

    @property
    def K(self) -> int:
        return self.trajectories.shape[0]


@dataclass
class DppKernel:
    L: np.ndarray
    S: np.ndarray
    q: np.ndarray


def context_width(D: int, H: int) -> int:
    return D + 2 * H + 2


def past_features(history: np.ndarray, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad/trim a (n, 2) history to H rows; returns (relative history, last position)."""
    hist = np.asarray(history, dtype=np.float64).reshape(-1, 2)[-H:]
    if len(hist) < H:
        hist = np.concatenate([np.repeat(hist[:1], H - len(hist), axis=0), hist])
    last = hist[-1].copy()
    return hist - last, last


def build_context(h: Tensor, past_rel: np.ndarray, velocity: np.ndarray) -> Tensor:
    """Conditioning context: post-GNN feature, scaled relative history, ground-plane velocity."""
    tape = h.tape
    n = h.shape[0]
    extra = np.concatenate([np.asarray(past_rel).reshape(n, -1) / POS_SCALE,
                            np.asarray(velocity).reshape(n, 2)], axis=1)
    return ad.concat([h, tape.constant(extra)])


def init_cvae(store: ParamStore, C: int, H: int, T: int, Z: int, hidden: int) -> None:
    init_mlp(store, "cvae.enc", [2 * H + 2 * T + C, hidden])
    init_mlp(store, "cvae.mu", [hidden, Z], scale=0.5)
    init_mlp(store, "cvae.logvar", [hidden, Z], scale=0.1)
    init_mlp(store, "cvae.dec", [Z + C, hidden, 2 * T], scale=1.0)


def init_sampler(store: ParamStore, C: int, K: int, Z: int, hidden: int) -> None:
    init_mlp(store, "sampler", [C, hidden, K * Z], scale=1.0)


def _trunk(tape, store, prefix, x):
    if mlp_depth(store, prefix) == 0:
        return x
    return mlp(tape, store, prefix, x, hidden_act="tanh", out_act="tanh")


def cvae_encode(tape: Tape, store: ParamStore, past_rel, future_rel, context: Tensor) -> tuple[Tensor, Tensor]:
    """Posterior parameters (mu, logvar) from past, future and context."""
    n = context.shape[0]
    seq = np.concatenate([np.asarray(past_rel).reshape(n, -1), np.asarray(future_rel).reshape(n, -1)], axis=1)
    x = ad.concat([tape.constant(seq / POS_SCALE), context])
    h = _trunk(tape, store, "cvae.enc", x)
    mu = mlp(tape, store, "cvae.mu", h, out_act=None)
    logvar = mlp(tape, store, "cvae.logvar", h, out_act=None)
    return mu, logvar


def reparameterize(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    return mu + ad.exp(logvar * 0.5) * np.asarray(noise, dtype=np.float64).reshape(mu.shape)


@functools.lru_cache(maxsize=8)
def _cumsum_matrix(T: int) -> np.ndarray:
    C = np.kron(np.triu(np.ones((T, T))), np.eye(2))
    C.setflags(write=False)
    return C


def cvae_decode(tape: Tape, store: ParamStore, z: Tensor, context: Tensor) -> Tensor:
    """Flat relative trajectories (n, 2T): per-step displacements, cumulatively summed."""
    disp = mlp(tape, store, "cvae.dec", ad.concat([z, context]), hidden_act="tanh", out_act=None)
    T = disp.shape[1] // 2
    return disp @ _cumsum_matrix(T)


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-row KL(N(mu, exp(logvar)) || N(0, I)), averaged over rows."""
    per = ad.square(mu) + ad.exp(logvar) - logvar - 1.0
    return ad.reduce_mean(ad.reduce_sum(per, axis=1)) * 0.5


def step_sq_dist(pred: Tensor, target) -> Tensor:
    """(n, T) squared ground-plane distances between flat trajectories."""
    n, w = pred.shape
    diff = pred - np.asarray(target, dtype=np.float64).reshape(n, w)
    sq = ad.reduce_sum(ad.reshape(ad.square(diff), (n * (w // 2), 2)), axis=1)
    return ad.reshape(sq, (n, w // 2))


def cvae_loss(tape: Tape, store: ParamStore, past_rel, future_rel, context: Tensor, beta: float,
              noise) -> Tensor:
    """Mean squared step error of the reconstruction plus ``beta`` times the KL term."""
    mu, logvar = cvae_encode(tape, store, past_rel, future_rel, context)
    z = reparameterize(mu, logvar, noise)
    pred = cvae_decode(tape, store, z, context)
    rec = ad.reduce_mean(step_sq_dist(pred, future_rel))
    if beta == 0.0:
        return rec
    return rec + kl_divergence(mu, logvar) * beta


def sampler_forward(tape: Tape, store: ParamStore, context: Tensor, K: int) -> Tensor:
    """Deterministic latent codes, (n * K, Z), agent-major."""
    out = mlp(tape, store, "sampler", context, hidden_act="tanh", out_act=None)
    n = context.shape[0]
    Z = out.shape[1] // K
    return ad.reshape(out, (n * K, Z))


def repeat_rows(x: Tensor, K: int) -> Tensor:
    return ad.take_rows(x, np.repeat(np.arange(x.shape[0]), K))


# ---------------------------------------------------------------------------
# DPP
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=32)
def _pair_index(K: int, groups: int = 1):
    """Within-group pairs (i < j) of ``groups`` consecutive blocks of K items.

    ``gather`` maps each entry of the flattened N x N similarity matrix to a
    pair index, or to P (off-block zero) or P + 1 (diagonal one).
    """
    i0, j0 = np.triu_indices(K, k=1)
    I = np.concatenate([i0 + g * K for g in range(groups)])
    J = np.concatenate([j0 + g * K for g in range(groups)])
    N = K * groups
    P = len(I)
    gather = np.full((N, N), P, dtype=np.intp)
    gather[I, J] = np.arange(P)
    gather[J, I] = np.arange(P)
    gather[np.arange(N), np.arange(N)] = P + 1
    gather = gather.reshape(-1)
    for a in (I, J, gather):
        a.setflags(write=False)
    return I, J, gather


def dpp_kernel_tensor(trajs: Tensor, codes: Tensor, params: DppParams,
                      groups: int = 1) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable L = diag(q) S diag(q) for K flat trajectories and their codes.

    With ``groups`` > 1 the rows hold that many independent sample sets of
    equal size and L is block diagonal.
    """
    tape = trajs.tape
    N, w = trajs.shape
    K = N // groups
    T = w // 2
    Z = codes.shape[1]
    if K < 2 or K * groups != N:
        raise ValueError("a diversity kernel needs at least two samples per set")
    I, J, gather = _pair_index(K, groups)
    K = N
    P = len(I)
    diff = ad.take_rows(trajs, I) - ad.take_rows(trajs, J)
    step = ad.sqrt(ad.reduce_sum(ad.reshape(ad.square(diff), (P * T, 2)), axis=1))
    d = ad.reduce_mean(ad.reshape(step, (P, T)), axis=1)
    s_pair = ad.exp(ad.square(d) * (-1.0 / params.sigma_d ** 2))
    table = ad.concat([ad.reshape(s_pair, (P, 1)), tape.constant(np.array([[0.0], [1.0]]))], axis=0)
    S = ad.reshape(ad.take_rows(table, gather), (K, K))
    R = params.radius(Z)
    excess = ad.relu(ad.reduce_sum(ad.square(codes), axis=1) - R * R)
    q = ad.exp(excess * (-params.rho))
    Q = ad.reshape(q, (K, 1)) @ ad.reshape(q, (1, K))
    return S * Q, S, q


def expected_cardinality_tensor(L: Tensor) -> Tensor:
    K = L.shape[0]
    eye = np.eye(K)
    return ad.reduce_sum(ad.inv(L + eye) * eye) * -1.0 + float(K)


def diversity_loss(trajs: Tensor, codes: Tensor, params: DppParams, groups: int = 1) -> Tensor:
    """Negative expected cardinality, averaged over ``groups`` equal sample sets."""
    L, _, _ = dpp_kernel_tensor(trajs, codes, params, groups)
    ec = expected_cardinality_tensor(L)
    return -ec if groups == 1 else ec * (-1.0 / groups)


def _flat(trajs) -> np.ndarray:
    arr = np.asarray(trajs, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1)


def dpp_kernel(trajs, codes=None, sigma_d: float = 2.0, rho: float = 1.0, R: float | None = None) -> DppKernel:
    """DPP kernel for a sample set.

    ``trajs`` is a :class:`TrajectorySet` or a (K, T, 2) array; ``codes``
    defaults to the set's latent codes.
    """
    if isinstance(trajs, TrajectorySet):
        codes = trajs.codes if codes is None else codes
        trajs = trajs.trajectories
    flat = _flat(trajs)
    if not np.all(np.isfinite(flat)):
        raise ad.NumericalError("non-finite trajectory")
    if codes is None:
        codes = np.zeros((flat.shape[0], 1))
    tape = Tape()
    L, S, q = dpp_kernel_tensor(tape.constant(flat), tape.constant(codes), DppParams(sigma_d, rho, R))
    return DppKernel(L.data, S.data, q.data)


def _check_psd(L: np.ndarray) -> None:
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"kernel must be square, got {L.shape}")
    if not np.allclose(L, L.T, rtol=0, atol=1e-12 * max(1.0, np.abs(L).max(initial=0.0))):
        raise ValueError("kernel is not symmetric")
    if L.size and np.linalg.eigvalsh(L).min() < -1e-9 * max(1.0, np.abs(L).max()):
        raise ValueError("kernel is not positive semidefinite")


def nearest_psd(L: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues; the mean-distance Gaussian kernel is not PSD for every sample set."""
    L = 0.5 * (L + L.T)
    w, V = np.linalg.eigh(L)
    if w.min(initial=0.0) >= 0:
        return L
    out = (V * np.maximum(w, 0.0)) @ V.T
    return 0.5 * (out + out.T)


def expected_cardinality(L) -> float:
    """trace(I - (L + I)^-1) via an LU solve with partial pivoting."""
    if isinstance(L, DppKernel):
        L = L.L
    L = np.asarray(L, dtype=np.float64)
    _check_psd(L)
    K = L.shape[0]
    if K == 0:
        return 0.0
    try:
        inv = np.linalg.solve(L + np.eye(K), np.eye(K))
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"solve failed: {exc}") from exc
    return float(K - np.trace(inv))


def subset_logdet(L: np.ndarray, subset) -> float:
    """log det of the principal minor; -inf when it is not positive."""
    idx = list(subset)
    if not idx:
        return 0.0
    sign, logdet = np.linalg.slogdet(L[np.ix_(idx, idx)])
    return logdet if sign > 0 else -math.inf


def subset_det(L: np.ndarray, subset) -> float:
    idx = list(subset)
    if not idx:
        return 1.0
    return float(np.linalg.det(L[np.ix_(idx, idx)]))


def greedy_map(L, size: int | None = None) -> list[int]:
    """Greedy MAP selection: add the item with the largest strictly positive log-det gain.

    With ``size`` the positivity rule is dropped and exactly ``size`` items
    are chosen (best gain first, lowest index on ties), as long as the
    selected minor stays non-singular.
    """
    if isinstance(L, DppKernel):
        L = L.L
    L = np.asarray(L, dtype=np.float64)
    _check_psd(L)
    selected: list[int] = []
    current = 0.0
    remaining = list(range(L.shape[0]))
    while remaining and (size is None or len(selected) < size):
        best_gain, best = (0.0 if size is None else -math.inf), None
        for i in remaining:
            gain = subset_logdet(L, selected + [i]) - current
            if gain > best_gain:
                best_gain, best = gain, i
        if best is None:
            break
        selected.append(best)
        remaining.remove(best)
        current += best_gain
    return selected


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def decode_codes(store: ParamStore, codes: np.ndarray, context: np.ndarray) -> np.ndarray:
    """Decode (n, Z) codes against (n, C) contexts; returns flat relative trajectories."""
    tape = Tape()
    return cvae_decode(tape, store, tape.constant(codes), tape.constant(context)).data


def sample_forecast(store: ParamStore, context: np.ndarray, last_pos: np.ndarray, mode: str, K: int,
                    rng: np.random.Generator | None = None, dpp: DppParams | None = None) -> list[TrajectorySet]:
    """K future trajectories for each context row.

    ``iid`` draws codes from the seeded standard normal, ``learned_sampler``
    runs the deterministic sampling network, and ``greedy_map_over_iid``
    oversamples 4K iid codes and keeps a greedy-MAP subset.
    """
    if mode not in MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    context = np.asarray(context, dtype=np.float64).reshape(len(last_pos), -1)
    last_pos = np.asarray(last_pos, dtype=np.float64).reshape(-1, 2)
    n = len(context)
    if n == 0:
        return []
    Z = store["cvae.dec.W0"].shape[0] - context.shape[1]
    dpp = dpp or DppParams()
    if mode == LEARNED:
        if "sampler.W0" not in store:
            raise ValueError("learned_sampler mode requires a trained sampler")
        tape = Tape()
        ctx = tape.constant(context)
        codes = sampler_forward(tape, store, ctx, K)
        if codes.shape[0] != n * K:
            raise ValueError("sampler was trained for a different sample count")
        flat = cvae_decode(tape, store, codes, repeat_rows(ctx, K)).data
        codes = codes.data
    else:
        if rng is None:
            raise ValueError(f"{mode} mode needs a random generator")
        m = K if mode == IID else 4 * K
        codes = rng.standard_normal((n * m, Z))
        flat = decode_codes(store, codes, np.repeat(context, m, axis=0))
        if mode == GREEDY:
            keep_codes, keep_flat = [], []
            for a in range(n):
                c = codes[a * m:(a + 1) * m]
                f = flat[a * m:(a + 1) * m]
                ker = dpp_kernel(f.reshape(m, -1, 2), c, dpp.sigma_d, dpp.rho, dpp.radius(Z))
                chosen = greedy_map(nearest_psd(ker.L), size=K)
                rest = sorted((i for i in range(m) if i not in chosen), key=lambda i: (-ker.q[i], i))
                chosen = chosen + rest[: K - len(chosen)]
                keep_codes.append(c[chosen])
                keep_flat.append(f[chosen])
            codes = np.concatenate(keep_codes)
            flat = np.concatenate(keep_flat)
    out = []
    T = flat.shape[1] // 2
    for a in range(n):
        rel = flat[a * K:(a + 1) * K].reshape(K, T, 2)
        out.append(TrajectorySet(rel + last_pos[a], codes[a * K:(a + 1) * K].copy(), context[a].copy()))
    return out
