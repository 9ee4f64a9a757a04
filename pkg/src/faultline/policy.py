"""Fault-line selection policy: which alternate class to explain next.

The dialog state tracks which classes have already been exposed for the
current image; a two-layer recurrent network over the per-turn state
encodings scores the alternate classes, trained actor-critic style from a
uniform-replay pool of past interactions, with rewards favoring correct
quiz answers in few turns. A simulated user with per-class-pair
comprehension beliefs stands in for human subjects.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

POLICY_MAGIC = b"FLXPOL01"
TURN_NORM = 10.0  # fixed scale for the turn-count encoding component


@dataclass
class DialogTurn:
    c_alt: str
    quiz_correct: bool | None = None  # None while the quiz is open


@dataclass
class DialogState:
    session_id: str
    current_image_id: str
    c_pred: str
    history: list[DialogTurn] = field(default_factory=list)

    @property
    def exposure(self) -> dict[str, bool]:
        return {t.c_alt: True for t in self.history}

    @property
    def turn_count(self) -> int:
        return len(self.history)

    def begin_turn(self, c_alt: str) -> None:
        if c_alt == self.c_pred:
            raise ValueError("cannot show the predicted class as alternate")
        if any(t.c_alt == c_alt for t in self.history):
            raise ValueError(f"class {c_alt!r} already exposed for this image")
        self.history.append(DialogTurn(c_alt=c_alt))

    def complete_turn(self, quiz_correct: bool) -> None:
        if not self.history or self.history[-1].quiz_correct is not None:
            raise ValueError("no open turn to complete")
        self.history[-1].quiz_correct = quiz_correct

    def reset_image(self, image_id: str, c_pred: str) -> None:
        """New image: exposure resets, the recurrent state does not."""
        self.current_image_id = image_id
        self.c_pred = c_pred
        self.history = []

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "current_image_id": self.current_image_id,
            "c_pred": self.c_pred,
            "history": [
                {"c_alt": t.c_alt, "quiz_correct": t.quiz_correct}
                for t in self.history
            ],
        }


def encode_state(state: DialogState, class_labels: tuple[str, ...]) -> np.ndarray:
    """One-hot c_pred, exposure bits, and normalized turn count (2C+1 dims).

    Encoding depends on the exposed-class set, not the order it was shown.
    """
    c = len(class_labels)
    enc = np.zeros(2 * c + 1)
    enc[class_labels.index(state.c_pred)] = 1.0
    exposed = state.exposure
    for i, label in enumerate(class_labels):
        if exposed.get(label, False):
            enc[c + i] = 1.0
    enc[2 * c] = state.turn_count / TURN_NORM
    return enc


def valid_action_mask(encoding: np.ndarray, num_classes: int) -> np.ndarray:
    """Actions still available: neither the predicted class nor exposed."""
    pred_onehot = encoding[:num_classes]
    exposure = encoding[num_classes : 2 * num_classes]
    return (pred_onehot == 0) & (exposure == 0)


class PolicyModel(nn.Module):
    """Two-layer LSTM actor over state encodings, with a separate MLP critic.

    The action head starts at zero so a fresh policy is exactly uniform
    over valid actions; the critic starts at value zero.
    """

    def __init__(self, class_labels: tuple[str, ...], hidden: int = 64,
                 seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.class_labels = tuple(class_labels)
        self.hidden = hidden
        c = len(self.class_labels)
        in_dim = 2 * c + 1
        self.lstm = nn.LSTM(in_dim, hidden, num_layers=2)
        self.action_head = nn.Linear(hidden, c)
        self.critic = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.Tanh(), nn.Linear(hidden, 1)
        )
        nn.init.zeros_(self.action_head.weight)
        nn.init.zeros_(self.action_head.bias)
        nn.init.zeros_(self.critic[2].weight)
        nn.init.zeros_(self.critic[2].bias)
        self.double()

    @property
    def num_classes(self) -> int:
        return len(self.class_labels)

    def action_logits(self, prefix: list[np.ndarray]) -> torch.Tensor:
        """Logits after running the recurrent core over the encoding prefix."""
        seq = torch.as_tensor(np.stack(prefix), dtype=torch.float64)
        out, _ = self.lstm(seq.unsqueeze(1))
        return self.action_head(out[-1, 0])

    def value(self, encoding: np.ndarray) -> torch.Tensor:
        enc = torch.as_tensor(encoding, dtype=torch.float64)
        return self.critic(enc).squeeze(-1)

    def actor_parameters(self):
        yield from self.lstm.parameters()
        yield from self.action_head.parameters()


def masked_log_probs(logits: torch.Tensor, mask: np.ndarray) -> torch.Tensor:
    """Log-probabilities renormalized over the valid actions."""
    if not mask.any():
        raise ValueError("dialog exhausted: no valid actions")
    neg = torch.full_like(logits, -1e30)
    masked = torch.where(torch.as_tensor(mask), logits, neg)
    return masked - torch.logsumexp(masked, dim=-1, keepdim=True)


def select_action(
    policy: PolicyModel,
    state: DialogState,
    epsilon: float,
    rng: np.random.Generator,
    prefix: list[np.ndarray] | None = None,
) -> str:
    """epsilon-greedy over valid alternate classes (never c_pred, never repeats)."""
    enc = encode_state(state, policy.class_labels)
    mask = valid_action_mask(enc, policy.num_classes)
    if not mask.any():
        raise ValueError("dialog exhausted: no valid actions")
    valid = np.flatnonzero(mask)
    if rng.random() < epsilon:
        return policy.class_labels[int(rng.choice(valid))]
    with torch.no_grad():
        logits = policy.action_logits((prefix or []) + [enc]).numpy()
    logits = np.where(mask, logits, -np.inf)
    return policy.class_labels[int(np.argmax(logits))]


def rank_actions(
    policy: PolicyModel, state: DialogState,
    prefix: list[np.ndarray] | None = None,
) -> list[str]:
    """All valid alternate classes, best logit first (ties by class index)."""
    enc = encode_state(state, policy.class_labels)
    mask = valid_action_mask(enc, policy.num_classes)
    with torch.no_grad():
        logits = policy.action_logits((prefix or []) + [enc]).numpy()
    order = np.lexsort((np.arange(policy.num_classes), -logits))
    return [policy.class_labels[i] for i in order if mask[i]]


def reward(quiz_correct: bool, turn_count: int) -> float:
    """+1/-1 for the quiz outcome, minus 0.05 per turn taken."""
    if turn_count < 1:
        raise ValueError("turn_count must be >= 1")
    return (1.0 if quiz_correct else -1.0) - 0.05 * turn_count


@dataclass
class Transition:
    encoding: np.ndarray
    prefix: list[np.ndarray]  # encodings from session start through this turn
    action: int
    reward: float
    next_encoding: np.ndarray
    terminal: bool
    nstep_return: float = 0.0
    bootstrap_encoding: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


class ReplayBuffer:
    """Bounded FIFO pool of transitions; sampling never mutates contents."""

    def __init__(self, capacity: int = 2000):
        self._items: deque[Transition] = deque(maxlen=capacity)

    def append(self, t: Transition) -> None:
        self._items.append(t)

    def __len__(self) -> int:
        return len(self._items)

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition]:
        if len(self._items) == 0:
            raise ValueError("empty replay buffer")
        if len(self._items) < batch:
            raise ValueError(f"buffer has {len(self._items)} < batch {batch}")
        idx = rng.choice(len(self._items), size=batch, replace=False)
        return [self._items[int(i)] for i in idx]


@dataclass
class LearningConfig:
    learning_rate: float = 0.001
    grad_clip: float = 5.0
    value_coef: float = 0.5
    nstep: int = 3
    gamma: float = 1.0
    batch_size: int = 45
    update_every: int = 15
    replay_capacity: int = 2000
    epsilon_start: float = 0.6
    epsilon_end: float = 0.0
    anneal_episodes: int = 1000
    max_turns: int = 6


def epsilon_at(episode: int, cfg: LearningConfig) -> float:
    """Linear anneal from epsilon_start to epsilon_end over anneal_episodes."""
    if episode >= cfg.anneal_episodes:
        return cfg.epsilon_end
    frac = episode / cfg.anneal_episodes
    return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)


def attach_nstep_returns(
    episode: list[Transition], cfg: LearningConfig
) -> None:
    """Fill each transition's n-step return target from the episode tail."""
    T = len(episode)
    for t in range(T):
        ret, g, boot = 0.0, 1.0, None
        hit_terminal = False
        end = min(t + cfg.nstep, T)
        for j in range(t, end):
            ret += g * episode[j].reward
            g *= cfg.gamma
            if episode[j].terminal:
                hit_terminal = True
                break
        if not hit_terminal:
            if end < T:
                boot = episode[end].encoding
            else:  # truncated without a terminal flag
                boot = episode[T - 1].next_encoding
        episode[t].nstep_return = ret
        episode[t].bootstrap_encoding = boot


def surrogate_loss(
    policy: PolicyModel,
    batch: list[Transition],
    advantages: np.ndarray,
    returns: np.ndarray,
    value_coef: float,
) -> torch.Tensor:
    """Policy-gradient surrogate plus value regression, for a frozen batch.

    Advantages and return targets enter as constants, so the loss is a
    plain differentiable function of the parameters (checkable against
    finite differences).
    """
    logp_terms = []
    value_terms = []
    for t, adv, ret in zip(batch, advantages, returns):
        logits = policy.action_logits(t.prefix)
        mask = valid_action_mask(t.encoding, policy.num_classes)
        logp = masked_log_probs(logits, mask)[t.action]
        logp_terms.append(logp * float(adv))
        v = policy.value(t.encoding)
        value_terms.append((v - float(ret)) ** 2)
    policy_loss = -torch.stack(logp_terms).mean()
    value_loss = torch.stack(value_terms).mean()
    return policy_loss + value_coef * value_loss


def compute_targets(
    policy: PolicyModel, batch: list[Transition], cfg: LearningConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen Q-hat targets (n-step returns + bootstrap) and advantages."""
    returns = np.empty(len(batch))
    advantages = np.empty(len(batch))
    with torch.no_grad():
        for i, t in enumerate(batch):
            q = t.nstep_return
            if t.bootstrap_encoding is not None:
                q += (cfg.gamma ** cfg.nstep) * float(
                    policy.value(t.bootstrap_encoding)
                )
            returns[i] = q
            advantages[i] = q - float(policy.value(t.encoding))
    return advantages, returns


def update_policy(
    policy: PolicyModel,
    replay_buffer: ReplayBuffer,
    batch: int,
    cfg: LearningConfig,
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict:
    """One actor-critic step on a uniform replay sample."""
    sampled = replay_buffer.sample(batch, rng)
    advantages, returns = compute_targets(policy, sampled, cfg)
    loss = surrogate_loss(policy, sampled, advantages, returns, cfg.value_coef)
    opt = optimizer or torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
    opt.zero_grad()
    loss.backward()
    for p in policy.parameters():
        if p.grad is not None:
            p.grad.clamp_(-cfg.grad_clip, cfg.grad_clip)
    opt.step()
    return {
        "loss": float(loss.detach()),
        "mean_advantage": float(advantages.mean()),
        "mean_return": float(returns.mean()),
    }


@dataclass
class SimulatedUser:
    """Stand-in for a human subject: per class-pair comprehension beliefs.

    Seeing a fault-line for a pair nudges that pair's belief toward 1;
    quiz answers are Bernoulli draws from the (noise-mixed) belief.
    """

    belief: dict[tuple[str, str], float]
    learning_rate: float = 0.3
    quiz_noise: float = 0.0

    def __post_init__(self):
        for pair, p in self.belief.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"belief for {pair} outside [0, 1]: {p}")

    def observe(self, c_pred: str, c_alt: str) -> None:
        pair = (c_pred, c_alt)
        p = self.belief.get(pair, 0.0)
        self.belief[pair] = p + self.learning_rate * (1.0 - p)

    def answer_quiz(self, c_pred: str, c_alt: str,
                    rng: np.random.Generator) -> bool:
        p = self.belief.get((c_pred, c_alt), 0.0)
        p_eff = p * (1.0 - self.quiz_noise) + 0.5 * self.quiz_noise
        return bool(rng.random() < p_eff)


@dataclass
class Episode:
    transitions: list[Transition]
    length: int
    total_reward: float
    comprehended: bool


def simulate_dialog(
    policy: PolicyModel,
    user: SimulatedUser,
    bundle_provider,
    max_turns: int,
    *,
    image_id: str,
    c_pred: str,
    epsilon: float = 0.0,
    rng: np.random.Generator | None = None,
    cfg: LearningConfig | None = None,
) -> Episode:
    """Run one image's dialog loop against the simulated user.

    Ends when the user answers a quiz correctly (comprehension) or after
    max_turns. bundle_provider(image_id, c_alt) supplies the fault-line
    shown at each turn; it may return None in pure policy training.
    """
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    cfg = cfg or LearningConfig(max_turns=max_turns)
    state = DialogState(
        session_id="sim", current_image_id=image_id, c_pred=c_pred
    )
    transitions: list[Transition] = []
    prefix: list[np.ndarray] = []
    total = 0.0
    comprehended = False
    for turn in range(1, max_turns + 1):
        enc = encode_state(state, policy.class_labels)
        c_alt = select_action(policy, state, epsilon, rng, prefix=prefix)
        bundle_provider(image_id, c_alt)
        state.begin_turn(c_alt)
        user.observe(c_pred, c_alt)
        correct = user.answer_quiz(c_pred, c_alt, rng)
        state.complete_turn(correct)
        r = reward(correct, turn)
        total += r
        next_enc = encode_state(state, policy.class_labels)
        no_actions_left = not valid_action_mask(
            next_enc, policy.num_classes
        ).any()
        terminal = correct or turn == max_turns or no_actions_left
        transitions.append(
            Transition(
                encoding=enc,
                prefix=prefix + [enc],
                action=policy.class_labels.index(c_alt),
                reward=r,
                next_encoding=next_enc,
                terminal=terminal,
            )
        )
        prefix = prefix + [enc]
        if correct:
            comprehended = True
            break
        if no_actions_left:
            break
    attach_nstep_returns(transitions, cfg)
    return Episode(
        transitions=transitions,
        length=len(transitions),
        total_reward=total,
        comprehended=comprehended,
    )


def preferred_pair_population(
    class_labels: tuple[str, ...],
    seed: int = 0,
    high: float = 0.9,
    low: float = 0.05,
    jitter: float = 0.05,
    learning_rate: float = 0.15,
):
    """Factory for a heterogeneous user population with shared structure.

    Every user finds one alternate class per predicted class easy to
    grasp (a seeded cyclic preference shared across the population, which
    is what the policy can learn), with per-user jitter on all beliefs.
    """
    labels = tuple(class_labels)
    shift = int(np.random.default_rng(seed).integers(1, len(labels)))
    preferred = {
        c: labels[(i + shift) % len(labels)] for i, c in enumerate(labels)
    }

    def factory(episode_index: int, rng: np.random.Generator) -> SimulatedUser:
        belief = {}
        for cp in labels:
            for ca in labels:
                if ca == cp:
                    continue
                base = high if ca == preferred[cp] else low
                belief[(cp, ca)] = float(
                    np.clip(base + jitter * rng.normal(), 0.0, 1.0)
                )
        return SimulatedUser(belief=belief, learning_rate=learning_rate)

    return factory


# --- training loop ----------------------------------------------------------


def train_policy(
    policy: PolicyModel,
    users,  # callable (episode_index, rng) -> SimulatedUser
    episodes: int,
    cfg: LearningConfig,
    seed: int = 0,
    bundle_provider=None,
    log_path: str | Path | None = None,
) -> dict:
    """Simulated-user training: replay-pool actor-critic, update every
    cfg.update_every interactions, epsilon annealed per episode."""
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(cfg.replay_capacity)
    optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
    provider = bundle_provider or (lambda image_id, c_alt: None)
    interactions = 0
    updates = 0
    log_fh = open(log_path, "w") if log_path else None
    history = []
    try:
        for ep in range(episodes):
            eps = epsilon_at(ep, cfg)
            user = users(ep, rng)
            c_pred = policy.class_labels[int(rng.integers(policy.num_classes))]
            episode = simulate_dialog(
                policy, user, provider, cfg.max_turns,
                image_id=f"train_{ep}", c_pred=c_pred,
                epsilon=eps, rng=rng, cfg=cfg,
            )
            loss = None
            for t in episode.transitions:
                buffer.append(t)
                interactions += 1
                if interactions % cfg.update_every == 0:
                    stats = update_policy(
                        policy, buffer, min(cfg.batch_size, len(buffer)),
                        cfg, rng, optimizer,
                    )
                    loss = stats["loss"]
                    updates += 1
            record = {
                "episode": ep,
                "length": episode.length,
                "reward": episode.total_reward,
                "loss": loss,
                "epsilon": eps,
            }
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return {
        "episodes": episodes,
        "interactions": interactions,
        "updates": updates,
        "history": history,
    }


def evaluate_policy(
    policy: PolicyModel,
    users,
    episodes: int,
    cfg: LearningConfig,
    seed: int = 0,
    uniform: bool = False,
) -> dict:
    """Greedy (or uniform-random when uniform=True) rollouts, fixed seeds."""
    lengths = []
    rewards = []
    for ep in range(episodes):
        rng = np.random.default_rng(seed + ep)
        user = users(ep, rng)
        c_pred = policy.class_labels[int(rng.integers(policy.num_classes))]
        episode = simulate_dialog(
            policy, user, lambda i, c: None, cfg.max_turns,
            image_id=f"eval_{ep}", c_pred=c_pred,
            epsilon=1.0 if uniform else 0.0, rng=rng, cfg=cfg,
        )
        lengths.append(episode.length)
        rewards.append(episode.total_reward)
    return {
        "mean_length": float(np.mean(lengths)),
        "mean_reward": float(np.mean(rewards)),
        "lengths": lengths,
        "rewards": rewards,
    }


# --- checkpoint files -------------------------------------------------------


def save_policy(
    policy: PolicyModel,
    path: str | Path,
    episodes: int = 0,
    epsilon: float = 0.0,
    sequence: int = 0,
) -> None:
    """Versioned binary: magic, JSON header, float32 LE parameter blob."""
    names, shapes, blobs = [], [], []
    for name, p in policy.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        blobs.append(
            np.ascontiguousarray(p.detach().numpy(), dtype="<f4").tobytes()
        )
    header = {
        "params": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
        "classes": list(policy.class_labels),
        "hidden": policy.hidden,
        "episodes": episodes,
        "epsilon": epsilon,
        "sequence": sequence,
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(POLICY_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_policy(path: str | Path) -> tuple[PolicyModel, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(POLICY_MAGIC)] != POLICY_MAGIC:
        raise ValueError(f"{path} is not a policy checkpoint")
    (hlen,) = struct.unpack(
        "<I", raw[len(POLICY_MAGIC) : len(POLICY_MAGIC) + 4]
    )
    start = len(POLICY_MAGIC) + 4
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    policy = PolicyModel(tuple(header["classes"]), hidden=header["hidden"])
    offset = start + hlen
    state = {}
    for rec in header["params"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw[offset : offset + 4 * count], dtype="<f4")
        if arr.size != count:
            raise ValueError("truncated policy checkpoint")
        state[rec["name"]] = torch.as_tensor(
            arr.reshape(shape).astype(np.float64)
        )
        offset += 4 * count
    policy.load_state_dict(state)
    return policy, header
