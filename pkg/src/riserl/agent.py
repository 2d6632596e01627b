"""Q-networks (plain, dual-stream recurrent, trajectory-recurrent), acting and learning."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import kernels
from .config import ExperimentConfig, Mode, NetworkConfig
from .encoders import (
    CombineMode,
    EmaEncoder,
    LearnableEncoder,
    LearnableEncoderSpec,
    MainEncoderView,
    Upscaler,
    _random_projection,
    combine,
    head_input_width,
    make_fixed_encoder,
)
from .errors import NumericFault, UsageError
from .nnsub import (Adam, Dense, LSTMCell, ParamGroup, backward, clip_global_norm, huber, layer_checks,
                    lstm_unroll)
from .replay import ContextBatch, SequenceBatch


class CountingEncoder(LearnableEncoder):
    """Learnable encoder that counts every observation it encodes."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.passes = 0

    def forward(self, x):
        self.passes += int(x.shape[0])
        return super().forward(x)


class Head(ParamGroup):
    def __init__(self, d_in: int, hidden: int, num_actions: int, generator=None):
        super().__init__()
        self.fc0 = Dense(d_in, hidden, generator=generator, name="omega_head.fc0")
        self.fc1 = Dense(hidden, num_actions, generator=generator, name="omega_head.fc1")

    def forward(self, x):
        return self.fc1(F.relu(self.fc0(x)))


class QNetwork(nn.Module):
    """phi (learnable encoder), psi (LSTM), Omega (upscaler), omega (head) and,
    for the dual-stream mode, the non-learnable per-frame encoder."""

    def __init__(self, cfg: NetworkConfig, obs_hw: tuple[int, int], num_actions: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.cfg = cfg
        self.mode = cfg.mode
        self.combine_mode = cfg.combine
        self.num_actions = num_actions
        spec = LearnableEncoderSpec([tuple(c) for c in cfg.convs], cfg.feature_dim, cfg.framestack)
        self.phi = CountingEncoder(spec, obs_hw, generator=g)
        F_, H = cfg.feature_dim, cfg.lstm_hidden
        self.fixed = None
        self.psi = None
        self.omega_up = None
        self.down = None
        if self.mode is Mode.PLAIN:
            head_in = F_
        elif self.mode is Mode.R2D2:
            self.psi = LSTMCell(F_, H, generator=g, name="psi")
            head_in = H
        else:
            self.fixed = make_fixed_encoder(cfg.fixed, obs_hw, self.phi)
            d = self.fixed.embed_dim
            self.psi = LSTMCell(d, H, generator=g, name="psi")
            if self.combine_mode is not CombineMode.CONCATENATE:
                self.omega_up = Upscaler(H, F_, generator=g)
            if self.combine_mode is CombineMode.EARLY_COMBINE:
                self.down = _random_projection(F_, d, cfg.fixed.seed + 1)
            head_in = head_input_width(self.combine_mode, H, F_)
        self.head = Head(head_in, cfg.head_hidden, num_actions, generator=g)

    @property
    def embed_dim(self) -> int:
        return self.fixed.embed_dim if self.fixed is not None else 1

    def fixed_parameters(self) -> list[torch.Tensor]:
        """Tensors that belong to the non-learnable stream."""
        out = []
        if self.fixed is not None:
            out += list(self.fixed.parameters())
        if self.down is not None:
            out += list(self.down.parameters())
        return out

    def trainable_parameters(self) -> list[nn.Parameter]:
        fixed = {id(p) for p in self.fixed_parameters()}
        return [p for p in self.parameters() if p.requires_grad and id(p) not in fixed]

    def _require(self, mode: Mode):
        if self.mode is not mode:
            raise UsageError(f"network is in {self.mode.value} mode, not {mode.value}")

    # -- forward forms -----------------------------------------------------

    def q_plain(self, obs: torch.Tensor) -> torch.Tensor:
        self._require(Mode.PLAIN)
        return self.head(self.phi(obs))

    def lstm_inputs(self, window: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if self.combine_mode is CombineMode.EARLY_COMBINE:
            return torch.sigmoid(self.down(z).unsqueeze(1) * window)
        return window

    def q_rise(self, window, mask, obs, h0=None, c0=None, grad_enabled_from: int = 0) -> torch.Tensor:
        """Q from a [B,K,d] embedding window ending at t and the framestack at t."""
        self._require(Mode.RISE)
        z = self.phi(obs)
        out, _ = lstm_unroll(self.psi, self.lstm_inputs(window, z), h0, c0, mask, grad_enabled_from)
        return self.head(combine(out[:, -1], z, self.omega_up, self.combine_mode, self.cfg.add_sigmoid))

    def q_r2d2(self, obs_seq, mask, h0=None, c0=None, burn_in: int = 0) -> torch.Tensor:
        """Q at every position of [B,T,fs,H,W]; positions < burn_in carry no gradient."""
        self._require(Mode.R2D2)
        B, T = obs_seq.shape[:2]
        flat = obs_seq.reshape(B * T, *obs_seq.shape[2:])
        if burn_in > 0:
            with torch.no_grad():
                zb = self.phi(obs_seq[:, :burn_in].reshape(B * burn_in, *obs_seq.shape[2:]))
            zt = self.phi(obs_seq[:, burn_in:].reshape(B * (T - burn_in), *obs_seq.shape[2:])) if T > burn_in \
                else zb[:0]
            z = torch.cat([zb.view(B, burn_in, -1), zt.view(B, T - burn_in, -1)], dim=1)
        else:
            z = self.phi(flat).view(B, T, -1)
        out, _ = lstm_unroll(self.psi, z, h0, c0, mask, burn_in)
        return self.head(out)

    # -- single-step acting --------------------------------------------------

    def step_recurrent(self, x, h, c):
        return self.psi(x, h, c)

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        return self.fixed(frames)


def split_state(hidden) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    if hidden is None:
        return None, None
    t = torch.as_tensor(hidden)
    return t[:, 0].contiguous(), t[:, 1].contiguous()


def epsilon_at(frames: int, start: float, end: float, decay_frames: int, disable_frames: int | None = None) -> float:
    if disable_frames is not None and frames >= disable_frames:
        return 0.0
    if frames >= decay_frames:
        return end
    return start + (end - start) * (frames / decay_frames)


@dataclass
class ActorState:
    h: torch.Tensor
    c: torch.Tensor
    window: torch.Tensor | None = None
    window_mask: torch.Tensor | None = None
    epsilon: float = 1.0
    behavior: str = "epsilon_greedy"

    def reset(self, which: np.ndarray) -> None:
        idx = torch.as_tensor(np.flatnonzero(which), dtype=torch.long)
        if idx.numel() == 0:
            return
        self.h[idx] = 0.0
        self.c[idx] = 0.0
        if self.window is not None:
            self.window[idx] = 0.0
            self.window_mask[idx] = False


@dataclass
class ActResult:
    actions: np.ndarray
    embeddings: np.ndarray
    hidden: np.ndarray | None
    q: np.ndarray


@dataclass
class LossReport:
    loss: float
    td_errors: np.ndarray
    grad_norm: float
    grad_norm_clipped: float
    encoder_passes: int
    q_updates: int
    valid_updates: int
    fixed_grad_abs: float = 0.0


@dataclass
class Counters:
    encoder_passes: int = 0
    q_updates: int = 0
    batches: int = 0
    per_batch: list = field(default_factory=list)


class Agent:
    """Owns the online/target networks, the optimizer and the run counters."""

    def __init__(self, cfg: ExperimentConfig, num_actions: int, dtype=torch.float32):
        self.cfg = cfg
        ncfg = cfg.network
        self.mode = ncfg.mode
        obs_hw = (cfg.env.obs_size, cfg.env.obs_size)
        self.online = QNetwork(ncfg, obs_hw, num_actions, seed=cfg.seed).to(dtype)
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.optimizer = Adam(self.online.trainable_parameters(), lr=cfg.optim.lr,
                              betas=(cfg.optim.beta1, cfg.optim.beta2), eps=cfg.adam_eps)
        self.rng = np.random.default_rng(cfg.seed + 7)
        self.counters = Counters()
        self.grad_steps = 0
        self.fixed_grad_abs = 0.0
        self.num_actions = num_actions

    # -- acting --------------------------------------------------------------

    def initial_actor_state(self, num_envs: int) -> ActorState:
        H = self.cfg.network.lstm_hidden
        st = ActorState(torch.zeros(num_envs, H), torch.zeros(num_envs, H))
        if self.mode is Mode.RISE and self.online.combine_mode is CombineMode.EARLY_COMBINE:
            K = self.cfg.network.context + self.cfg.network.no_grad_burn_in
            st.window = torch.zeros(num_envs, K, self.online.embed_dim)
            st.window_mask = torch.zeros(num_envs, K, dtype=torch.bool)
        return st

    @torch.no_grad()
    def q_act(self, state: ActorState, obs: np.ndarray, frames: np.ndarray):
        """Greedy-side computation for a batch of envs. Advances the recurrent state."""
        net = self.online
        obs_t = torch.from_numpy(np.ascontiguousarray(obs, dtype=np.float32))
        hidden = torch.stack([state.h, state.c], dim=1).numpy().copy() if self.mode is not Mode.PLAIN else None
        emb = np.zeros((obs.shape[0], net.embed_dim), dtype=np.float32)
        if self.mode is Mode.PLAIN:
            q = net.q_plain(obs_t)
        elif self.mode is Mode.R2D2:
            z = net.phi(obs_t)
            state.h, state.c = net.step_recurrent(z, state.h, state.c)
            q = net.head(state.h)
        else:
            e = net.embed(torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)))
            emb = e.numpy().copy()
            if state.window is not None:
                state.window = torch.roll(state.window, -1, dims=1)
                state.window_mask = torch.roll(state.window_mask, -1, dims=1)
                state.window[:, -1] = e
                state.window_mask[:, -1] = True
                q = net.q_rise(state.window, state.window_mask, obs_t)
            else:
                z = net.phi(obs_t)
                state.h, state.c = net.step_recurrent(e, state.h, state.c)
                q = net.head(combine(state.h, z, net.omega_up, net.combine_mode, net.cfg.add_sigmoid))
        if not torch.isfinite(q).all():
            raise NumericFault("non-finite Q-values while acting", "act")
        return q.numpy(), emb, hidden

    def act(self, state: ActorState, obs: np.ndarray, frames: np.ndarray, epsilon: float,
            episode_start: np.ndarray | None = None) -> ActResult:
        if episode_start is not None:
            state.reset(episode_start)
        state.epsilon = epsilon
        q, emb, hidden = self.q_act(state, obs, frames)
        greedy = q.argmax(axis=1)
        explore = self.rng.random(q.shape[0]) < epsilon
        random_a = self.rng.integers(self.num_actions, size=q.shape[0])
        actions = np.where(explore, random_a, greedy)
        return ActResult(actions, emb, hidden, q)

    # -- learning ------------------------------------------------------------

    def _t(self, x, dtype=None):
        dtype = dtype or next(self.online.parameters()).dtype
        return torch.as_tensor(np.asarray(x)).to(dtype)

    def _bootstrap(self, q_target_next: torch.Tensor, q_online_next: torch.Tensor | None) -> torch.Tensor:
        if q_online_next is None:
            return q_target_next.max(dim=-1).values
        a_star = q_online_next.argmax(dim=-1, keepdim=True)
        return q_target_next.gather(-1, a_star).squeeze(-1)

    def n_step_target(self, batch: ContextBatch) -> torch.Tensor:
        """G + gamma^j * (not terminal) * Q_target(s_{t+j}, a*) for transition batches."""
        double_q = self.cfg.schedule.double_q
        with torch.no_grad():
            next_obs = self._t(batch.next_obs)
            q_online_next = None
            if self.mode is Mode.PLAIN:
                q_next = self.target.q_plain(next_obs)
                if double_q:
                    q_online_next = self.online.q_plain(next_obs)
            else:
                tw, tm = batch.target_window()
                h0, c0 = split_state(batch.next_hidden)
                args = (self._t(tw), torch.as_tensor(tm), next_obs)
                kw = dict(h0=None if h0 is None else h0.to(next_obs.dtype),
                          c0=None if c0 is None else c0.to(next_obs.dtype))
                q_next = self.target.q_rise(*args, **kw)
                if double_q:
                    q_online_next = self.online.q_rise(*args, **kw)
            boot = self._bootstrap(q_next, q_online_next)
            G = self._t(batch.returns)
            disc = self._t(batch.discounts)
            notdone = 1.0 - self._t(batch.terminals.astype(np.float32))
            return G + disc * notdone * boot

    def _online_q_transitions(self, batch: ContextBatch) -> torch.Tensor:
        obs = self._t(batch.obs)
        if self.mode is Mode.PLAIN:
            return self.online.q_plain(obs)
        w, m = batch.online_window()
        h0, c0 = split_state(batch.hidden)
        return self.online.q_rise(self._t(w), torch.as_tensor(m), obs,
                                  None if h0 is None else h0.to(obs.dtype),
                                  None if c0 is None else c0.to(obs.dtype),
                                  grad_enabled_from=self.cfg.network.no_grad_burn_in)

    def _passes(self) -> int:
        return self.online.phi.passes + self.target.phi.passes

    def loss_transitions(self, batch: ContextBatch):
        y = self.n_step_target(batch)
        q = self._online_q_transitions(batch)
        q_sa = q.gather(1, torch.as_tensor(batch.actions, dtype=torch.long)[:, None]).squeeze(1)
        td = y - q_sa
        w = self._t(batch.weights)
        loss = (w * huber(td, self.cfg.optim.huber_kappa)).mean()
        n = batch.batch_size
        return loss, td.detach(), n, n

    def loss_sequences(self, batch: SequenceBatch):
        cfg = self.cfg
        l, m = batch.burn_in, batch.train_len
        T = l + m
        n, gamma = cfg.schedule.n_step, cfg.schedule.gamma
        obs = self._t(batch.obs)
        mask = torch.as_tensor(batch.mask)
        h0, c0 = split_state(batch.hidden)
        th0, tc0 = split_state(batch.next_hidden)
        dt = obs.dtype
        q_online = self.online.q_r2d2(obs[:, :T], mask[:, :T], None if h0 is None else h0.to(dt),
                                      None if c0 is None else c0.to(dt), burn_in=l)
        with torch.no_grad():
            q_target = self.target.q_r2d2(obs[:, 1:], mask[:, 1:], None if th0 is None else th0.to(dt),
                                          None if tc0 is None else tc0.to(dt), burn_in=l)
        b = obs.shape[0]
        # per trained position i in [l, T): rewards r_i .. r_{i+n-1}, never past position T-1
        pos = np.arange(l, T)[:, None] + np.arange(n)[None, :]
        inside = pos < T
        posc = np.minimum(pos, T - 1)
        rew = batch.rewards[:, posc].reshape(b * m, n)
        term = batch.terminals[:, posc].reshape(b * m, n)
        valid = (batch.mask[:, posc] & inside[None]).reshape(b * m, n)
        G, steps, done = kernels.nstep_returns(rew, term, valid, gamma)
        boot_pos = np.arange(l, T)[None, :] + steps.reshape(b, m)  # absolute position i + j in [l+1, T]
        idx = torch.as_tensor(boot_pos - 1, dtype=torch.long)
        q_next = q_target.gather(1, idx[:, :, None].expand(-1, -1, q_target.shape[-1]))
        boot = q_next.max(dim=-1).values.reshape(b * m)
        y = (self._t(G) + self._t(gamma ** steps.astype(np.float64)) * (1.0 - self._t(done.astype(np.float32)))
             * boot)
        acts = torch.as_tensor(batch.actions[:, l:T], dtype=torch.long)
        q_sa = q_online[:, l:T].gather(2, acts[:, :, None]).squeeze(2).reshape(b * m)
        td = y - q_sa
        trained = torch.as_tensor(batch.mask[:, l:T].reshape(b * m))
        w = self._t(np.repeat(batch.weights, m))
        per = w * huber(td, cfg.optim.huber_kappa) * trained.to(dt)
        loss = per.sum() / trained.sum().clamp(min=1).to(dt)
        td_seq = (td.detach() * trained.to(dt)).reshape(b, m).abs()
        cnt = trained.reshape(b, m).sum(1).clamp(min=1).to(dt)
        prio = 0.9 * td_seq.max(1).values + 0.1 * td_seq.sum(1) / cnt
        return loss, prio, b * m, int(trained.sum())

    def _loss(self, batch):
        if isinstance(batch, SequenceBatch):
            if self.mode is not Mode.R2D2:
                raise UsageError("sequence batches are only valid in r2d2 mode")
            return self.loss_sequences(batch)
        if self.mode is Mode.R2D2:
            raise UsageError("r2d2 mode trains on sequence batches")
        return self.loss_transitions(batch)

    def train_step(self, batch) -> LossReport:
        passes0 = self._passes()
        loss, td, updates, valid = self._loss(batch)
        passes = self._passes() - passes0
        if not torch.isfinite(loss):
            # rerun with per-layer checks so the fault names the offending layer
            with layer_checks():
                self._loss(batch)
            raise NumericFault("non-finite loss", "loss")
        self.optimizer.zero_grad()
        backward(loss)
        fixed_abs = 0.0
        for p in self.online.fixed_parameters():
            if p.grad is not None:
                fixed_abs += float(p.grad.abs().sum())
        self.fixed_grad_abs += fixed_abs
        grads = [p.grad for p in self.optimizer.params]
        clipped, norm = clip_global_norm(grads, self.cfg.optim.clip_norm)
        self.optimizer.step(clipped)
        self.grad_steps += 1
        ema = self.online.fixed
        if isinstance(ema, EmaEncoder):
            ema.update()
        self.counters.encoder_passes += passes
        self.counters.q_updates += updates
        self.counters.batches += 1
        self.counters.per_batch.append((passes, updates))
        return LossReport(
            loss=float(loss.detach()),
            td_errors=td.detach().abs().double().numpy() if td.dim() else np.array([float(td)]),
            grad_norm=norm,
            grad_norm_clipped=min(norm, self.cfg.optim.clip_norm),
            encoder_passes=passes,
            q_updates=updates,
            valid_updates=valid,
            fixed_grad_abs=fixed_abs,
        )

    def sync_target(self) -> None:
        with torch.no_grad():
            for (name, pt), (_, po) in zip(self.target.state_dict(keep_vars=True).items(),
                                          self.online.state_dict(keep_vars=True).items()):
                pt.copy_(po)

    # -- persistence -----------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"online.{k}": v for k, v in self.online.state_dict().items()}
        out.update({f"target.{k}": v for k, v in self.target.state_dict().items()})
        return out

    def load_state_tensors(self, tensors) -> None:
        on = {k[len("online."):]: v for k, v in tensors.items() if k.startswith("online.")}
        tg = {k[len("target."):]: v for k, v in tensors.items() if k.startswith("target.")}
        self.online.load_state_dict(on)
        if tg:
            self.target.load_state_dict(tg)


def staleness(agent: Agent, buffer, slots: np.ndarray) -> float:
    """Mean L2 gap between stored embeddings and what the fixed encoder gives now."""
    fixed = agent.online.fixed
    if fixed is None or not isinstance(fixed, MainEncoderView):
        return 0.0
    rec = buffer.recompute_embeddings(fixed, slots)
    return float(np.linalg.norm(rec - buffer.embeddings[slots], axis=1).mean())
