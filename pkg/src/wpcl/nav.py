"""Instruction following on top of the projection head.

The policy is a local candidate scorer.  For each action it looks at the
observation the agent would face after taking it (``Stop`` keeps the
current one) and scores

    logit[a] = h_a . (G^T h_instr + u) + S[a] . mean(h_visited) + b[a]

Objects visible at the final pose are scored as ``h_obj . (R^T h_instr)``
for grounding.  Training runs teacher-forced imitation with grounding, then
student rollouts supervised by shortest-path pseudo targets, each stage
optionally adding the weighted contrastive term on ``h_objs``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detector import DetectionReport, OracleConfig, detect_history
from .envsim import (
    Action,
    Episode,
    GridEnvironment,
    ObservationSpec,
    Pose,
    collect_history,
    distance_map,
    expert_action,
    step,
    visible_objects,
)
from .metrics import EpisodeResult, summarize
from .optim import DivergenceError, check_finite, make_optimizer
from .pcon import ContrastBatch, ContrastItem, _infonce, sample_batch
from .representation import (
    HeadParams,
    Perception,
    arrays_from_json,
    arrays_to_json,
    head_backward,
    head_forward,
    viewpoint_index,
)
from .weaksup import build_selection_matrix, pair_set

log = logging.getLogger(__name__)

ACTIONS = (Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT, Action.STOP)
N_ACTIONS = len(ACTIONS)


@dataclass(frozen=True)
class Instruction:
    tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("instruction must contain at least the target token")


def make_instruction(
    env: GridEnvironment,
    expert_poses: Sequence[Pose],
    target_id: int,
    spec: ObservationSpec,
    max_landmarks: int,
    rng: np.random.Generator,
) -> Instruction:
    """Landmark labels seen along the path (in order of first sighting), then the target label.

    When more than ``max_landmarks`` landmarks qualify, a seeded subset is
    kept in path order.
    """
    vocab = {lab: i for i, lab in enumerate(env.vocab)}
    target_label = env.object(target_id).label
    seen: list[str] = []
    for pose in expert_poses:
        ids = visible_objects(env, pose, spec)
        for oid in sorted(ids, key=lambda i: (max(abs(env.object(i).cell[0] - pose.cell[0]),
                                                  abs(env.object(i).cell[1] - pose.cell[1])), i)):
            lab = env.object(oid).label
            if lab != target_label and lab not in seen:
                seen.append(lab)
    if len(seen) > max_landmarks:
        keep = sorted(rng.choice(len(seen), size=max_landmarks, replace=False)) if max_landmarks else []
        seen = [seen[i] for i in keep]
    return Instruction(tuple(vocab[lab] for lab in seen) + (vocab[target_label],))


# --------------------------------------------------------------------------- parameters


@dataclass
class PolicyParams:
    E: np.ndarray    # (vocab, d_text) token embeddings
    pos: np.ndarray  # (max_tokens,) position weights, indexed from the last token
    G: np.ndarray    # (d_text, d) instruction-candidate bilinear
    u: np.ndarray    # (d,) instruction-free candidate score
    S: np.ndarray    # (4, d) state summary per action
    b: np.ndarray    # (4,) action bias
    R: np.ndarray    # (d_text, d) object grounding bilinear

    NAMES = ("E", "pos", "G", "u", "S", "b", "R")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.NAMES}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "PolicyParams":
        return PolicyParams(**arrays)

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()})

    @property
    def d(self) -> int:
        return self.G.shape[1]

    @classmethod
    def init(cls, vocab_size: int, d: int, d_text: int = 32, max_tokens: int = 4, seed: int = 0) -> "PolicyParams":
        rng = np.random.default_rng([seed, 404])
        return cls(
            E=rng.normal(0, 1 / np.sqrt(d_text), (vocab_size, d_text)),
            pos=np.zeros(max_tokens),
            G=rng.normal(0, 0.01, (d_text, d)),
            u=np.zeros(d),
            S=np.zeros((N_ACTIONS, d)),
            b=np.zeros(N_ACTIONS),
            R=rng.normal(0, 0.01, (d_text, d)),
        )

    @classmethod
    def zeros(cls, vocab_size: int, d: int, d_text: int = 32, max_tokens: int = 4) -> "PolicyParams":
        return cls(np.zeros((vocab_size, d_text)), np.zeros(max_tokens), np.zeros((d_text, d)),
                   np.zeros(d), np.zeros((N_ACTIONS, d)), np.zeros(N_ACTIONS), np.zeros((d_text, d)))


def save_policy(policy: PolicyParams, head: HeadParams, path, **meta) -> None:
    doc = {
        "policy": arrays_to_json("policy", policy.arrays()),
        "head": arrays_to_json("head", head.arrays(), lam=head.lam),
        **meta,
    }
    Path(path).write_text(json.dumps(doc))


def load_policy(path) -> tuple[PolicyParams, HeadParams, dict]:
    doc = json.loads(Path(path).read_text())
    policy = PolicyParams(**arrays_from_json(doc.pop("policy"), "policy"))
    hd = doc.pop("head")
    head = HeadParams(**arrays_from_json(hd, "head"), lam=hd["lam"])
    return policy, head, doc


# --------------------------------------------------------------------------- scoring


def _token_coeffs(n_tokens: int, max_tokens: int, pos: np.ndarray | None = None):
    """Per-token mixing weights ``1/L + pos[from_end]`` and their position slots."""
    slots = np.array([n_tokens - 1 - l for l in range(n_tokens)])
    valid = slots < max_tokens
    c = np.full(n_tokens, 1.0 / n_tokens)
    if pos is not None:
        c[valid] += pos[slots[valid]]
    return c, slots, valid


def embed_instruction(params: PolicyParams, W: Instruction) -> np.ndarray:
    tok = np.asarray(W.tokens)
    if tok.min() < 0 or tok.max() >= len(params.E):
        raise ValueError(f"instruction token outside vocabulary of size {len(params.E)}")
    c, _, _ = _token_coeffs(len(tok), len(params.pos), params.pos)
    return c @ params.E[tok]


def score_actions(params: PolicyParams, h_instr: np.ndarray, candidate_features: np.ndarray, state_summary: np.ndarray) -> np.ndarray:
    Hc = np.asarray(candidate_features)
    if Hc.shape != (N_ACTIONS, params.d) or state_summary.shape != (params.d,):
        raise ValueError(f"expected candidates ({N_ACTIONS}, {params.d}) and state ({params.d},)")
    q = params.G.T @ h_instr + params.u
    return Hc @ q + params.S @ state_summary + params.b


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def sap_loss(step_logits: Sequence[np.ndarray], expert_actions: Sequence[int]) -> float:
    if len(step_logits) != len(expert_actions):
        raise ValueError("step_logits and expert_actions differ in length")
    return float(sum(-log_softmax(np.asarray(l))[int(a)] for l, a in zip(step_logits, expert_actions)))


def og_loss(object_logits: np.ndarray, target_index: int) -> float:
    return float(-log_softmax(np.asarray(object_logits))[target_index])


def pid_target(env: GridEnvironment, pose: Pose, goal_cell, dist: dict | None = None) -> Action:
    return expert_action(pose, dist if dist is not None else distance_map(env, goal_cell))


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 1.0
    alpha: float = 0.5
    alpha_stage1: float | None = None
    alpha_stage2: float | None = None
    stage1_iters: int = 600
    stage2_iters: int = 200
    batch_size1: int = 8
    batch_size2: int = 8
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    lam: float = 0.2
    m: int = 1
    tau: float = 0.07
    K: int = 8
    symmetric: bool = False
    d: int = 64
    d_text: int = 32
    head_hidden: int | None = None
    max_tokens: int = 4
    eval_interval: int = 50
    sample_rollouts: bool = True

    def __post_init__(self):
        if self.gamma < 0 or self.alpha < 0:
            raise ValueError("gamma and alpha must be >= 0")

    def stage_alpha(self, stage: int) -> float:
        over = self.alpha_stage1 if stage == 1 else self.alpha_stage2
        return self.alpha if over is None else over


def total_loss(l_sap, l_pid, l_og, l_pcon, cfg: TrainConfig) -> float:
    parts = [0.0 if v is None else v for v in (l_sap, l_pid, l_og, l_pcon)]
    return cfg.gamma * parts[0] + parts[1] + parts[2] + cfg.alpha * parts[3]


# --------------------------------------------------------------------------- rollouts


@dataclass
class Rollout:
    episode: Episode
    poses: list[Pose]
    actions: list[Action]
    logits: list[np.ndarray]

    @property
    def T(self) -> int:
        return len(self.actions)


def candidate_poses(env: GridEnvironment, pose: Pose) -> list[Pose]:
    return [step(env, pose, a)[0] for a in ACTIONS]


def default_step_cap(ep: Episode) -> int:
    return 3 * len(ep.expert_path) + 8


class _EnvFeatures:
    """Head outputs for every pose of each environment, computed lazily."""

    def __init__(self, head: HeadParams, perception: Perception):
        self.head, self.perception = head, perception
        self._cache: dict[int, tuple[GridEnvironment, np.ndarray]] = {}

    def __call__(self, env: GridEnvironment) -> np.ndarray:
        hit = self._cache.get(env.seed)
        if hit is None or hit[0] is not env:
            H, _ = head_forward(self.head, self.perception.raw_all(env))
            hit = (env, H)
            self._cache[env.seed] = hit
        return hit[1]


def rollout(
    ep: Episode,
    chooser: Callable[[int, np.ndarray | None, Pose], Action],
    step_cap: int,
    policy: PolicyParams | None = None,
    feats: _EnvFeatures | None = None,
) -> Rollout:
    """Run one episode until ``Stop`` or ``step_cap`` actions.

    ``chooser(t, logits, pose)`` picks the action; ``logits`` is ``None``
    when no learned policy is attached.
    """
    env = ep.env
    poses, actions, logits_seq = [ep.start], [], []
    H = feats(env) if feats is not None else None
    h_instr = embed_instruction(policy, ep.instruction) if policy is not None else None
    visited_sum = None
    for t in range(step_cap):
        pose = poses[-1]
        logits = None
        if policy is not None:
            row = H[viewpoint_index(env, pose)]
            visited_sum = row.copy() if visited_sum is None else visited_sum + row
            cands = H[[viewpoint_index(env, p) for p in candidate_poses(env, pose)]]
            logits = score_actions(policy, h_instr, cands, visited_sum / (t + 1))
            logits_seq.append(logits)
        a = Action(chooser(t, logits, pose))
        actions.append(a)
        if a is Action.STOP:
            break
        poses.append(step(env, pose, a)[0])
    return Rollout(ep, poses, actions, logits_seq)


def pid_loss(ro: Rollout, env: GridEnvironment | None = None) -> float:
    env = env or ro.episode.env
    dist = distance_map(env, ro.episode.goal_cell)
    targets = [pid_target(env, p, ro.episode.goal_cell, dist) for p in ro.poses[: len(ro.logits)]]
    return sap_loss(ro.logits, targets)


def to_result(ro: Rollout, threshold: int) -> EpisodeResult:
    cells = tuple(p.cell for p in ro.poses)
    return EpisodeResult(cells, cells[-1], ro.episode.goal_cell, ro.episode.shortest_len, threshold, ro.episode.env)


def evaluate(
    policy: PolicyParams | str,
    head: HeadParams | None,
    episodes: Sequence[Episode],
    perception: Perception | None = None,
    step_cap: int | None = None,
    success_threshold: int = 1,
    seed: int = 0,
) -> list[EpisodeResult]:
    """Greedy rollouts.  ``policy`` may also be ``"expert"``, ``"random"`` or ``"stop"``."""
    results = []
    rng = np.random.default_rng([seed, 505])
    feats = _EnvFeatures(head, perception) if isinstance(policy, PolicyParams) else None
    for ep in episodes:
        cap = default_step_cap(ep) if step_cap is None else step_cap
        if isinstance(policy, PolicyParams):
            ro = rollout(ep, lambda t, lg, p: ACTIONS[int(np.argmax(lg))], cap, policy, feats)
        elif policy == "expert":
            dist = distance_map(ep.env, ep.goal_cell)
            ro = rollout(ep, lambda t, lg, p: expert_action(p, dist), cap)
        elif policy == "random":
            ro = rollout(ep, lambda t, lg, p: ACTIONS[rng.integers(N_ACTIONS)], cap)
        elif policy == "stop":
            ro = rollout(ep, lambda t, lg, p: Action.STOP, cap)
        else:
            raise ValueError(f"unknown policy {policy!r}")
        results.append(to_result(ro, success_threshold))
    return results


# --------------------------------------------------------------------------- batched objective


class _Rows:
    """Deduplicating table of raw feature rows."""

    def __init__(self, perception: Perception):
        self.perception = perception
        self.index: dict[tuple, int] = {}
        self.rows: list[np.ndarray] = []

    def pose(self, env: GridEnvironment, pose: Pose) -> int:
        key = (env.seed, viewpoint_index(env, pose))
        r = self.index.get(key)
        if r is None:
            r = self.index[key] = len(self.rows)
            self.rows.append(self.perception.raw(env, pose))
        return r

    def crop(self, env: GridEnvironment, pose: Pose, oid: int) -> int:
        key = (env.seed, viewpoint_index(env, pose), "crop", oid)
        r = self.index.get(key)
        if r is None:
            r = self.index[key] = len(self.rows)
            self.rows.append(self.perception.crop(env, pose, oid))
        return r

    def matrix(self) -> np.ndarray:
        return np.stack(self.rows) if self.rows else np.zeros((0, self.perception.d0))


@dataclass
class TrajBatch:
    Z: np.ndarray
    cand: np.ndarray                 # (T, 4) row ids
    state_w: np.ndarray              # (T, R) visited-mean weights
    step_ep: np.ndarray              # (T,) episode position
    labels: np.ndarray               # (T,) supervised action ids
    tokens: list[np.ndarray]
    og: list                         # per episode: (obj_rows, target_pos) or None
    hist_rows: np.ndarray            # (N,) rows of observation histories
    pcon: ContrastBatch = field(default_factory=lambda: ContrastBatch(()))
    og_skipped: int = 0

    @property
    def n_episodes(self) -> int:
        return len(self.tokens)


def build_batch(
    trajectories: Sequence[tuple[Episode, Sequence[Pose], Sequence[int]]],
    perception: Perception,
    with_og: bool,
    pair_sets: Sequence | None = None,
    K: int = 8,
    rng: np.random.Generator | None = None,
) -> TrajBatch:
    """Assemble a batch from ``(episode, visited poses, target action per pose)``.

    ``pair_sets[e]`` is the :class:`~wpcl.weaksup.PairSet` over the
    trajectory's observation history (indices into its poses).
    """
    rows = _Rows(perception)
    cand, step_ep, labels, state_members, tokens, og = [], [], [], [], [], []
    hist_rows, items, og_skipped = [], [], 0
    for e, (ep, poses, targets) in enumerate(trajectories):
        env = ep.env
        tokens.append(np.asarray(ep.instruction.tokens))
        visited = []
        for t, (pose, a) in enumerate(zip(poses, targets)):
            visited.append(rows.pose(env, pose))
            cand.append([rows.pose(env, p) for p in candidate_poses(env, pose)])
            step_ep.append(e)
            labels.append(int(a))
            state_members.append(list(visited))
        if with_og:
            final = poses[-1]
            ids = sorted(perception.visible(env, final))
            if ep.target_object_id in ids:
                og.append((np.array([rows.crop(env, final, oid) for oid in ids]), ids.index(ep.target_object_id)))
            else:
                og.append(None)
                og_skipped += 1
        else:
            og.append(None)
        if pair_sets is not None and pair_sets[e] is not None:
            off = len(hist_rows)
            hist_rows.extend(rows.pose(env, p) for p in poses)
            sub = sample_batch(pair_sets[e], K, rng)
            items.extend(
                ContrastItem(it.anchor + off, it.positive + off, tuple(k + off for k in it.negatives))
                for it in sub.items
            )
    Z = rows.matrix()
    state_w = np.zeros((len(cand), len(Z)))
    for t, members in enumerate(state_members):
        np.add.at(state_w[t], members, 1.0 / len(members))
    return TrajBatch(
        Z=Z,
        cand=np.array(cand, dtype=np.int64).reshape(-1, N_ACTIONS),
        state_w=state_w,
        step_ep=np.array(step_ep, dtype=np.int64),
        labels=np.array(labels, dtype=np.int64),
        tokens=tokens,
        og=og,
        hist_rows=np.array(hist_rows, dtype=np.int64),
        pcon=ContrastBatch(tuple(items), K),
        og_skipped=og_skipped,
    )


def objective(
    policy: PolicyParams,
    head: HeadParams,
    batch: TrajBatch,
    w_ce: float,
    w_og: float,
    w_pcon: float,
    tau: float,
    symmetric: bool = False,
    need_grad: bool = True,
):
    """Weighted batch loss ``w_ce * CE + w_og * OG + w_pcon * pcon``.

    CE is the per-episode sum of step cross-entropies, averaged over
    episodes; OG is averaged over episodes where the target is visible at
    the final pose; pcon is the mean over contrastive items.
    Returns ``(total, components, policy_grads, head_grads)``.
    """
    n_ep = batch.n_episodes
    H, cache = head_forward(head, batch.Z)
    d = H.shape[1]
    L = len(policy.pos)

    coeffs = [_token_coeffs(len(tok), L, policy.pos) for tok in batch.tokens]
    Hi = np.stack([c @ policy.E[tok] for (c, _, _), tok in zip(coeffs, batch.tokens)])

    # action cross-entropy
    Hi_s = Hi[batch.step_ep]
    q = Hi_s @ policy.G + policy.u
    Hc = H[batch.cand]
    Sst = batch.state_w @ H
    logits = np.einsum("tad,td->ta", Hc, q) + Sst @ policy.S.T + policy.b
    lsm = log_softmax(logits)
    T = len(batch.labels)
    ce = float(-lsm[np.arange(T), batch.labels].sum() / n_ep) if T else 0.0

    # object grounding
    og_terms = [(e, rows, tgt) for e, item in enumerate(batch.og) if item is not None for rows, tgt in [item]]
    og_val = 0.0
    og_cache = []
    for e, rows, tgt in og_terms:
        r = policy.R.T @ Hi[e]
        ol = H[rows] @ r
        ls = log_softmax(ol)
        og_val -= ls[tgt]
        og_cache.append((e, rows, tgt, r, ls))
    n_og = len(og_terms)
    if n_og:
        og_val /= n_og

    # contrastive term on h_objs
    k = head.obj_dim
    pc_val, dF = 0.0, None
    if batch.pcon.items:
        feats = H[batch.hist_rows, :k]
        pc_val, dF, _ = _infonce(batch.pcon, feats, tau, symmetric, need_grad=need_grad and w_pcon != 0)

    total = w_ce * ce + w_og * og_val + w_pcon * pc_val
    comps = {"ce": ce, "og": og_val, "pcon": pc_val, "og_skipped": batch.og_skipped}
    if not need_grad:
        return total, comps, None, None

    gp = {name: np.zeros_like(v) for name, v in policy.arrays().items()}
    dH = np.zeros_like(H)
    dHi = np.zeros_like(Hi)
    if T and w_ce:
        P = np.exp(lsm)
        dl = P
        dl[np.arange(T), batch.labels] -= 1.0
        dl *= w_ce / n_ep
        dq = np.einsum("ta,tad->td", dl, Hc)
        gp["G"] += Hi_s.T @ dq
        gp["u"] += dq.sum(0)
        gp["S"] += dl.T @ Sst
        gp["b"] += dl.sum(0)
        np.add.at(dHi, batch.step_ep, dq @ policy.G.T)
        np.add.at(dH, batch.cand.ravel(), (dl[:, :, None] * q[:, None, :]).reshape(-1, d))
        dH += batch.state_w.T @ (dl @ policy.S)
    if n_og and w_og:
        for e, rows, tgt, r, ls in og_cache:
            dol = np.exp(ls)
            dol[tgt] -= 1.0
            dol *= w_og / n_og
            np.add.at(dH, rows, dol[:, None] * r[None, :])
            dr = H[rows].T @ dol
            gp["R"] += np.outer(Hi[e], dr)
            dHi[e] += policy.R @ dr
    if dF is not None and w_pcon:
        np.add.at(dH[:, :k], batch.hist_rows, w_pcon * dF)
    for e, tok in enumerate(batch.tokens):
        c, slots, valid = coeffs[e]
        np.add.at(gp["E"], tok, c[:, None] * dHi[e][None, :])
        np.add.at(gp["pos"], slots[valid], policy.E[tok[valid]] @ dHi[e])
    gh = head_backward(head, cache, dH)
    return total, comps, gp, gh


# --------------------------------------------------------------------------- training


def history_pairs(env: GridEnvironment, poses: Sequence[Pose], perception: Perception, m: int,
                  oracle: OracleConfig, stream: int, reports: Sequence[DetectionReport] | None = None):
    hist = collect_history(env, poses, perception.spec)
    if reports is None:
        reports = detect_history(hist, env, "oracle", oracle, stream=stream)
    return pair_set(build_selection_matrix(reports, m))


@dataclass
class TrainResult:
    policy: PolicyParams
    head: HeadParams
    log: list[dict]
    best_iter: int
    best_spl: float
    evals: list[dict]
    durations: dict[str, float] = field(default_factory=dict)


LOG_COLUMNS = ("iter", "stage", "l_sap", "l_og", "l_pid", "l_pcon", "total")


def train(
    cfg: TrainConfig,
    episodes: Sequence[Episode],
    perception: Perception,
    val_episodes: Sequence[Episode] | None = None,
    detections: dict[int, list[DetectionReport]] | None = None,
    oracle: OracleConfig = OracleConfig(),
    init: tuple[PolicyParams, HeadParams] | None = None,
    on_eval: Callable[[int, PolicyParams, HeadParams, dict], None] | None = None,
    success_threshold: int = 1,
    step_cap: int | None = None,
) -> TrainResult:
    """Two-stage training; returns the checkpoint with the best validation SPL.

    ``detections`` maps an episode's position in ``episodes`` to reports on
    its expert history; missing entries fall back to the oracle detector.
    """
    if not episodes:
        raise ValueError("training set is empty")
    rng = np.random.default_rng([cfg.seed, 606])
    vocab_size = len(episodes[0].env.vocab)
    if init is None:
        head = HeadParams.init(perception.d0, cfg.d, cfg.lam, cfg.head_hidden, seed=cfg.seed)
        policy = PolicyParams.init(vocab_size, cfg.d, cfg.d_text, cfg.max_tokens, seed=cfg.seed)
    else:
        policy, head = init[0].copy(), init[1].copy()
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum)

    expert = []
    for i, ep in enumerate(episodes):
        poses = ep.expert_poses()
        reports = detections.get(i) if detections else None
        pairs = history_pairs(ep.env, poses, perception, cfg.m, oracle, ep.seed, reports)
        expert.append((ep, poses, [int(a) for a in ep.expert_path], pairs))

    log_rows: list[dict] = []
    evals: list[dict] = []
    best = (policy.copy(), head.copy())
    best_spl, best_iter = -1.0, 0

    def maybe_eval(it: int, force: bool = False):
        nonlocal best, best_spl, best_iter
        if not val_episodes:
            return
        if not force and (cfg.eval_interval <= 0 or it % cfg.eval_interval):
            return
        res = evaluate(policy, head, val_episodes, perception, step_cap, success_threshold)
        summ = summarize(res)
        rec = {"iter": it, **vars(summ)}
        evals.append(rec)
        if on_eval is not None:
            on_eval(it, policy, head, rec)
        if summ.SPL > best_spl:
            best_spl, best_iter = summ.SPL, it
            best = (policy.copy(), head.copy())

    def apply(gp, gh, total, it):
        nonlocal policy, head
        grads = {**{f"policy.{k}": v for k, v in gp.items()}, **{f"head.{k}": v for k, v in gh.items()}}
        try:
            check_finite(total, grads, f"at iteration {it}")
        except DivergenceError:
            log.error("training diverged at iteration %d (total=%r)", it, total)
            raise
        params = {**{f"policy.{k}": v for k, v in policy.arrays().items()},
                  **{f"head.{k}": v for k, v in head.arrays().items()}}
        new = opt.step(params, grads)
        policy = policy.with_arrays({k[7:]: v for k, v in new.items() if k.startswith("policy.")})
        head = head.with_arrays({k[5:]: v for k, v in new.items() if k.startswith("head.")})

    it = 0
    t0 = time.perf_counter()
    maybe_eval(0, force=True)
    a1 = cfg.stage_alpha(1)
    for _ in range(cfg.stage1_iters):
        it += 1
        pick = rng.choice(len(expert), size=min(cfg.batch_size1, len(expert)), replace=False)
        trajs = [expert[i][:3] for i in pick]
        batch = build_batch(trajs, perception, True, [expert[i][3] for i in pick] if a1 else None, cfg.K, rng)
        total, comps, gp, gh = objective(policy, head, batch, cfg.gamma, 1.0, a1, cfg.tau, cfg.symmetric)
        apply(gp, gh, total, it)
        log_rows.append({"iter": it, "stage": 1, "l_sap": comps["ce"], "l_og": comps["og"], "l_pid": 0.0,
                         "l_pcon": comps["pcon"], "total": total})
        maybe_eval(it)

    t1 = time.perf_counter()
    a2 = cfg.stage_alpha(2)
    for _ in range(cfg.stage2_iters):
        it += 1
        pick = rng.choice(len(episodes), size=min(cfg.batch_size2, len(episodes)), replace=False)
        feats = _EnvFeatures(head, perception)
        trajs, psets = [], []
        for i in pick:
            ep = episodes[i]
            dist = distance_map(ep.env, ep.goal_cell)
            if cfg.sample_rollouts:
                def choose(t, lg, p):
                    pr = np.exp(log_softmax(lg))
                    return ACTIONS[rng.choice(N_ACTIONS, p=pr)]
            else:
                def choose(t, lg, p):
                    return ACTIONS[int(np.argmax(lg))]
            cap = default_step_cap(ep) if step_cap is None else step_cap
            ro = rollout(ep, choose, cap, policy, feats)
            poses = ro.poses[: ro.T]
            if not poses:
                continue
            targets = [int(pid_target(ep.env, p, ep.goal_cell, dist)) for p in poses]
            trajs.append((ep, poses, targets))
            psets.append(history_pairs(ep.env, poses, perception, cfg.m, oracle, ep.seed * 1000 + it) if a2 else None)
        if not trajs:
            continue
        batch = build_batch(trajs, perception, False, psets if a2 else None, cfg.K, rng)
        total, comps, gp, gh = objective(policy, head, batch, 1.0, 0.0, a2, cfg.tau, cfg.symmetric)
        apply(gp, gh, total, it)
        log_rows.append({"iter": it, "stage": 2, "l_sap": 0.0, "l_og": 0.0, "l_pid": comps["ce"],
                         "l_pcon": comps["pcon"], "total": total})
        maybe_eval(it)

    if val_episodes and (not evals or evals[-1]["iter"] != it):
        maybe_eval(it, force=True)
    if not val_episodes:
        best, best_iter = (policy, head), it
    durations = {"stage1": t1 - t0, "stage2": time.perf_counter() - t1}
    return TrainResult(best[0], best[1], log_rows, best_iter, best_spl, evals, durations)
