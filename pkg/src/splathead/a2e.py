"""Audio-driven expression model: a condition encoder over speech features
with identity embeddings, a DDPM schedule, a transformer decoder denoiser
with cross-attention and FiLM conditioning, classifier-free guidance,
windowed training losses, ancestral sampling, and identity fine-tuning.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ValidationError
from .fit import AdamState, adam_step

AUDIO_DIM = 1280
ID_DIM = 64
WINDOW = 10
DROPOUT_P = 0.1


@dataclass
class AudioFeatureSeq:
    features: np.ndarray   # T x 1280 float32
    speaker_id: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[1] != AUDIO_DIM:
            raise ValidationError(
                f"audio features must be T x {AUDIO_DIM}, got {self.features.shape}")
        if self.features.shape[0] < 1:
            raise ValidationError("audio sequence must have at least one frame")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("non-finite audio features")


@dataclass
class ConditionSeq:
    tokens: np.ndarray      # T x d
    cbar: np.ndarray        # d
    h: np.ndarray           # d, pre-encoder pooled projection
    dropped: bool = False


@dataclass
class DiffusionSchedule:
    n_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.n_steps)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1) \
                or np.any(np.diff(self.betas) < 0):
            raise ValidationError("betas must be increasing within (0, 1)")
        self.alphas = 1.0 - self.betas
        # abar[0] = 1 convention: n = 0 is the clean signal
        self.abar = np.concatenate([[1.0], np.cumprod(self.alphas)])
        if np.any(np.diff(self.abar) >= 0):
            raise ValidationError("cumulative alpha must decrease strictly")


@dataclass
class A2EConfig:
    num_expr: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_enc_layers: int = 2
    ffn_mult: int = 2
    num_speakers: int = 2
    seed: int = 0
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)


class A2EModel:
    """Diffusion-transformer expression generator."""

    def __init__(self, config: A2EConfig):
        self.config = config
        self.schedule = config.schedule
        self.params = nn.Params()
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        h = config.ffn_mult * d
        p = self.params
        nn.init_linear(p, rng, "cond.audio", AUDIO_DIM, d)
        nn.init_linear(p, rng, "cond.ident", ID_DIM, d)
        nn.init_linear(p, rng, "cond.mix", 2 * d, d)
        nn.init_layer_norm(p, "cond.ln", d)
        for i in range(config.n_enc_layers):
            nn.init_attention(p, rng, f"enc{i}.attn", d)
            nn.init_layer_norm(p, f"enc{i}.ln1", d)
            nn.init_ffn(p, rng, f"enc{i}.ffn", d, h)
            nn.init_layer_norm(p, f"enc{i}.ln2", d)
        p.add("emb.table", 0.1 * rng.standard_normal((config.num_speakers, ID_DIM)))
        nn.init_linear(p, rng, "time.1", d, d)
        nn.init_linear(p, rng, "time.2", d, d)
        nn.init_linear(p, rng, "time.tok", d, 2 * d)
        nn.init_linear(p, rng, "dec.in", config.num_expr, d)
        for i in range(config.n_layers):
            nn.init_attention(p, rng, f"dec{i}.self", d)
            nn.init_layer_norm(p, f"dec{i}.ln1", d)
            nn.init_attention(p, rng, f"dec{i}.cross", d)
            nn.init_layer_norm(p, f"dec{i}.ln2", d)
            nn.init_ffn(p, rng, f"dec{i}.ffn", d, h)
            nn.init_layer_norm(p, f"dec{i}.ln3", d)
            nn.init_film(p, rng, f"dec{i}.film", d, d)
        nn.init_linear(p, rng, "dec.out", d, config.num_expr)

    # -- tape-level building blocks -------------------------------------

    def _encode_t(self, p, tape, audio: AudioFeatureSeq):
        cfg = self.config
        if not 0 <= audio.speaker_id < cfg.num_speakers:
            raise ValidationError(
                f"unknown speaker id {audio.speaker_id} "
                f"(table has {cfg.num_speakers} rows)")
        T = audio.features.shape[0]
        a = nn.linear(p, "cond.audio", tape.leaf(audio.features))
        ident = ad.embedding_lookup(p["emb.table"],
                                    np.array([audio.speaker_id]))
        ident = nn.linear(p, "cond.ident", ident)
        h_pool = ad.mean(ad.add(a, ident), axis=0)
        x = ad.concat([a, ad.repeat_rows(ident, T)], axis=1)
        x = nn.linear(p, "cond.mix", x)
        x = ad.add(x, tape.leaf(nn.sinusoidal_embedding(np.arange(T),
                                                        cfg.d_model)))
        x = nn.layer_norm(p, "cond.ln", x)
        for i in range(cfg.n_enc_layers):
            y = nn.layer_norm(p, f"enc{i}.ln1", x)
            x = ad.add(x, nn.attention(p, f"enc{i}.attn", y, y, cfg.n_heads))
            y = nn.layer_norm(p, f"enc{i}.ln2", x)
            x = ad.add(x, nn.ffn(p, f"enc{i}.ffn", y))
        return x, h_pool

    def _time_emb_t(self, p, tape, n):
        base = nn.sinusoidal_embedding([n], self.config.d_model)
        t = nn.linear(p, "time.2",
                      ad.gelu(nn.linear(p, "time.1", tape.leaf(base))))
        return t   # (1, d)

    def _decode_t(self, p, tape, z_t, tokens_t, cbar_t, n):
        cfg = self.config
        d = cfg.d_model
        T = z_t.data.shape[0]
        temb = self._time_emb_t(p, tape, n)                   # (1, d)
        ttok = ad.reshape(nn.linear(p, "time.tok", temb), (2, d))
        mem = ad.concat([tokens_t, ttok], axis=0)
        film_cond = ad.add(cbar_t, temb)                      # (1, d)
        x = nn.linear(p, "dec.in", z_t)
        x = ad.add(x, tape.leaf(nn.sinusoidal_embedding(np.arange(T), d)))
        for i in range(cfg.n_layers):
            y = nn.layer_norm(p, f"dec{i}.ln1", x)
            x = ad.add(x, nn.attention(p, f"dec{i}.self", y, y, cfg.n_heads))
            y = nn.layer_norm(p, f"dec{i}.ln2", x)
            x = ad.add(x, nn.attention(p, f"dec{i}.cross", y, mem, cfg.n_heads))
            y = nn.layer_norm(p, f"dec{i}.ln3", x)
            x = ad.add(x, nn.ffn(p, f"dec{i}.ffn", y))
            x = nn.film(p, f"dec{i}.film", x, film_cond)
        return nn.linear(p, "dec.out", x)

    # -- public numpy interface -----------------------------------------

    def encode_condition(self, audio: AudioFeatureSeq, dropout=False,
                         rng=None) -> ConditionSeq:
        tape = ad.Tape()
        p = self.params.leaves(tape)
        tokens, h = self._encode_t(p, tape, audio)
        tok = tokens.data.astype(np.float64)
        hv = h.data.astype(np.float64)
        dropped = False
        if dropout:
            if rng is None:
                raise ValidationError("dropout requires an rng")
            if rng.uniform() < DROPOUT_P:
                tok = np.zeros_like(tok)
                hv = np.zeros_like(hv)
                dropped = True
        return ConditionSeq(tokens=tok, cbar=tok.mean(axis=0), h=hv,
                            dropped=dropped)

    def predict(self, z, cond: ConditionSeq, n):
        z = np.asarray(z, dtype=np.float32)
        self._check_predict(z, cond, n)
        tape = ad.Tape()
        p = self.params.leaves(tape)
        out = self._decode_t(tape=tape, p=p, z_t=tape.leaf(z),
                             tokens_t=tape.leaf(cond.tokens),
                             cbar_t=tape.leaf(cond.cbar[None, :]), n=n)
        return out.data.astype(np.float64)

    def _check_predict(self, z, cond, n):
        if z.ndim != 2 or z.shape[1] != self.config.num_expr:
            raise ValidationError(
                f"z must be T x {self.config.num_expr}, got {z.shape}")
        if cond.tokens.shape != (z.shape[0], self.config.d_model):
            raise ValidationError(
                f"condition tokens {cond.tokens.shape} do not match "
                f"z {z.shape} and width {self.config.d_model}")
        if not 0 <= n <= self.schedule.n_steps:
            raise ValidationError(f"diffusion step {n} out of range")

    def null_condition(self, T) -> ConditionSeq:
        d = self.config.d_model
        return ConditionSeq(tokens=np.zeros((T, d)), cbar=np.zeros(d),
                            h=np.zeros(d), dropped=True)

    def cfg_predict(self, z, cond: ConditionSeq, n, w):
        if w < 0:
            raise ValidationError("guidance scale must be >= 0")
        e_cond = self.predict(z, cond, n)
        if w == 1.0:
            return e_cond
        e_null = self.predict(z, self.null_condition(z.shape[0]), n)
        return e_null + w * (e_cond - e_null)

    def q_sample(self, e0, n, rng):
        e0 = np.asarray(e0, dtype=np.float64)
        if not 0 <= n <= self.schedule.n_steps:
            raise ValidationError(f"diffusion step {n} out of range")
        if n == 0:
            return e0.copy()
        ab = self.schedule.abar[n]
        eps = rng.standard_normal(e0.shape)
        return np.sqrt(ab) * e0 + np.sqrt(1.0 - ab) * eps

    def sample(self, audio: AudioFeatureSeq, w=1.0, seed=0, window=WINDOW):
        """Ancestral DDPM sampling over training-sized windows; each window
        is denoised from pure noise and the results are concatenated."""
        rng = np.random.default_rng(seed)
        T = audio.features.shape[0]
        chunks = []
        for t0 in range(0, T, window):
            feats = audio.features[t0:t0 + window]
            chunk = AudioFeatureSeq(features=feats,
                                    speaker_id=audio.speaker_id)
            chunks.append(self._sample_window(chunk, w, rng))
        return np.concatenate(chunks, axis=0)

    def _sample_window(self, audio: AudioFeatureSeq, w, rng):
        """Ancestral DDPM sampling: the x0 prediction at each step is folded
        into the posterior mean for the next noise level."""
        cond = self.encode_condition(audio)
        sch = self.schedule
        T = audio.features.shape[0]
        z = rng.standard_normal((T, self.config.num_expr))
        for n in range(sch.n_steps, 0, -1):
            x0 = self.cfg_predict(z, cond, n, w)
            ab_n = sch.abar[n]
            ab_p = sch.abar[n - 1]
            beta = sch.betas[n - 1]
            alpha = sch.alphas[n - 1]
            mean = (np.sqrt(ab_p) * beta / (1 - ab_n)) * x0 \
                + (np.sqrt(alpha) * (1 - ab_p) / (1 - ab_n)) * z
            if n > 1:
                var = beta * (1 - ab_p) / (1 - ab_n)
                z = mean + np.sqrt(var) * rng.standard_normal(z.shape)
            else:
                z = mean
        if not np.all(np.isfinite(z)):
            raise ValidationError("sampling produced non-finite expressions")
        return z


def window_loss_t(e_hat_t, e_t, lam_exp=1.0, lam_temp=0.5):
    """Tape loss over one window: summed squared L2 row error plus Huber of
    successive prediction differences."""
    T = e_hat_t.data.shape[0]
    diff = ad.sub(e_hat_t, e_t)
    l_exp = ad.sum_(ad.mul(diff, diff))
    total = ad.scale(l_exp, lam_exp)
    if T >= 2:
        vel = ad.sub(ad.slice_(e_hat_t, np.s_[1:]),
                     ad.slice_(e_hat_t, np.s_[:-1]))
        l_temp = ad.sum_(ad.huber(vel, delta=1.0))
        total = ad.add(total, ad.scale(l_temp, lam_temp))
    return total


def window_loss(e_hat, e, lam_exp=1.0, lam_temp=0.5):
    """Numpy wrapper: returns (total, d_e_hat)."""
    tape = ad.Tape()
    eh = tape.leaf(np.asarray(e_hat, dtype=np.float32))
    ev = tape.leaf(np.asarray(e, dtype=np.float32))
    if eh.data.shape != ev.data.shape:
        raise ValidationError(
            f"window shapes differ: {eh.data.shape} vs {ev.data.shape}")
    loss = window_loss_t(eh, ev, lam_exp, lam_temp)
    tape.backward(loss)
    return float(loss.data), tape.grad(eh).astype(np.float64)


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-4
    lam_exp: float = 1.0
    lam_temp: float = 0.5
    window: int = WINDOW
    seed: int = 0
    log_every: int = 100


def _training_step(model, p, tape, audio_win, exp_win, sid, n, noise_rng,
                   drop, cfg: TrainConfig):
    """Build the windowed diffusion loss on the tape. Returns the loss tensor."""
    seq = AudioFeatureSeq(features=audio_win, speaker_id=sid)
    if drop:
        T = audio_win.shape[0]
        tokens = tape.leaf(np.zeros((T, model.config.d_model), dtype=np.float32))
    else:
        tokens, _ = model._encode_t(p, tape, seq)
    cbar = ad.reshape(ad.mean(tokens, axis=0), (1, model.config.d_model))
    z = model.q_sample(exp_win, n, noise_rng).astype(np.float32)
    e_hat = model._decode_t(p, tape, tape.leaf(z), tokens, cbar, n)
    return window_loss_t(e_hat, tape.leaf(exp_win.astype(np.float32)),
                         cfg.lam_exp, cfg.lam_temp)


def train(model: A2EModel, dataset, config: TrainConfig, log=None,
          frozen=(), lr=None, target_speaker=None):
    """Train on (audio, expressions, speaker_id) clips. Per step: sample a
    clip and a window, a diffusion step n uniform in [1, N], noise the clean
    window, predict, loss, Adam update. Conditioning dropout fires at p=0.1.

    `frozen` names parameter prefixes whose gradients are zeroed;
    `target_speaker`, when set, restricts embedding-table updates to that
    row. Returns the loss history."""
    if not dataset:
        raise ValidationError("empty dataset")
    if target_speaker is None:
        speakers = {sid for _, _, sid in dataset}
        if len(speakers) < 2:
            raise ValidationError(
                "multi-speaker prior requires at least 2 speakers")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history = []
    step_lr = config.lr if lr is None else lr
    for step in range(config.steps):
        audio, exp, sid = dataset[rng.integers(len(dataset))]
        T = audio.shape[0]
        wlen = min(config.window, T)
        t0 = int(rng.integers(0, T - wlen + 1))
        n = int(rng.integers(1, model.schedule.n_steps + 1))
        drop = bool(rng.uniform() < DROPOUT_P)
        tape = ad.Tape()
        p = model.params.leaves(tape)
        loss = _training_step(model, p, tape, audio[t0:t0 + wlen],
                              exp[t0:t0 + wlen], sid, n, rng, drop, config)
        tape.backward(loss)
        grads = {}
        for name, leaf in p.items():
            g = tape.grad(leaf)
            if any(name.startswith(f) for f in frozen):
                g = np.zeros_like(g)
            if name == "emb.table" and target_speaker is not None:
                mask = np.zeros_like(g)
                mask[target_speaker] = g[target_speaker]
                g = mask
            grads[name] = g
        adam_step(model.params.arrays, grads, state, step_lr)
        history.append(float(loss.data))
        if log and step % config.log_every == 0:
            log(step, float(loss.data))
    return history


def evaluate(model: A2EModel, dataset, config: TrainConfig, seed=12345):
    """Mean windowed loss over the dataset with dropout off and fixed noise."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for audio, exp, sid in dataset:
        T = audio.shape[0]
        wlen = min(config.window, T)
        for t0 in range(0, T - wlen + 1, wlen):
            n = int(rng.integers(1, model.schedule.n_steps + 1))
            tape = ad.Tape()
            p = model.params.leaves(tape)
            loss = _training_step(model, p, tape, audio[t0:t0 + wlen],
                                  exp[t0:t0 + wlen], sid, n, rng, False,
                                  config)
            total += float(loss.data)
            count += 1
    return total / max(count, 1)


def finetune(model: A2EModel, train_set, val_set, target_speaker,
             config: TrainConfig = None, lr=1e-5, patience=3,
             eval_every=50, max_steps=600, log=None):
    """Identity fine-tuning: the audio projection is frozen, only the target
    speaker's embedding row moves, and training stops early when validation
    loss stops improving."""
    if not val_set:
        raise ValidationError("empty validation split")
    if config is None:
        config = TrainConfig()
    if not 0 <= target_speaker < model.config.num_speakers:
        raise ValidationError(f"speaker {target_speaker} not in the table")
    best = evaluate(model, val_set, config)
    start_val = best
    best_params = {k: v.copy() for k, v in model.params.arrays.items()}
    bad = 0
    steps_done = 0
    while steps_done < max_steps and bad < patience:
        chunk = TrainConfig(steps=eval_every, lr=lr, lam_exp=config.lam_exp,
                            lam_temp=config.lam_temp, window=config.window,
                            seed=config.seed + steps_done)
        train(model, train_set, chunk, frozen=("cond.audio",),
              target_speaker=target_speaker, lr=lr)
        steps_done += eval_every
        val = evaluate(model, val_set, config)
        if log:
            log(steps_done, val)
        if val < best - 1e-9:
            best = val
            best_params = {k: v.copy() for k, v in model.params.arrays.items()}
            bad = 0
        else:
            bad += 1
    model.params.arrays.update(best_params)
    return {"start_val": start_val, "best_val": best, "steps": steps_done}
