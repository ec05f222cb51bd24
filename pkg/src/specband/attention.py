"""Spectral CNNs with per-block attention modules (CNN-k / CNN-kA).

Each building block is conv -> ReLU -> batch norm -> max pool.  When
attention is enabled, the pooled maps of every block feed an attention
estimator (channel-mixing 1x1 conv, ReLU, spatial softmax), a local linear
classifier and a tanh confidence gate; the network output is
``softmax(o_net * c_net + sum_l c_l * o_l)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .selection import Heatmap

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = (96, 54, 36, 24)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``state`` carries epoch/batch diagnostics."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class AttentionCnnConfig:
    num_blocks: int = 2
    channels: tuple = DEFAULT_CHANNELS
    conv_k: int = 5
    conv_padding: int = 2
    pool_k: int = 2
    pool_stride: int = 2
    hidden: tuple = (512, 128)
    num_classes: int = 2
    use_attention: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.num_blocks not in (2, 3, 4):
            raise ValueError(f"num_blocks must be 2, 3 or 4, got {self.num_blocks}")
        if len(self.channels) < self.num_blocks:
            raise ValueError("fewer channel counts than blocks")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def name(self):
        return f"CNN-{self.num_blocks}{'A' if self.use_attention else ''}"

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["hidden"] = list(self.hidden)
        return d


def level_lengths(b, config: AttentionCnnConfig):
    """Spectral length after each block's pooling stage.

    Raises ``ValueError`` naming the first stage where the length would
    drop below the pooling window.
    """
    lengths = []
    length = b
    for stage in range(1, config.num_blocks + 1):
        length = nn.conv_out_len(length, config.conv_k, 1, config.conv_padding)
        if length < config.pool_k:
            raise ValueError(
                f"band count {b} too small: block {stage} would pool a length-{length} "
                f"signal with window {config.pool_k}"
            )
        length = nn.pool_out_len(length, config.pool_k, config.pool_stride)
        lengths.append(length)
    return lengths


@dataclass(eq=False)
class Block:
    conv_w: nn.Param
    conv_b: nn.Param
    bn: nn.BatchNormState
    att_w: nn.Param | None = None
    att_b: nn.Param | None = None
    w_o: nn.Param | None = None
    w_c: nn.Param | None = None


@dataclass
class ForwardRecord:
    """Batched activations of one forward pass (leading axis = sample)."""

    z: list = field(default_factory=list)
    z_hat: list = field(default_factory=list)
    h: list = field(default_factory=list)
    o: list = field(default_factory=list)
    c: list = field(default_factory=list)
    o_net: np.ndarray | None = None
    c_net: np.ndarray | None = None
    output: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)


# ----------------------------------------------------- attention components


def attention_estimator(z, weight, bias):
    """Collapse feature maps (N, L, n) to a spatial heatmap (N, L).

    Returns ``(z_hat, pre)`` where ``pre`` is the pre-ReLU score.
    """
    pre = z @ weight + bias
    return nn.softmax(nn.relu(pre), axis=1), pre


def attention_estimator_backward(dz_hat, z_hat, pre, z, weight):
    """Returns ``(dz, dweight, dbias)``."""
    dq = nn.softmax_backward(dz_hat, z_hat, axis=1)
    de = nn.relu_backward(dq, pre)
    dweight = np.einsum("nl,nlc->c", de, z)
    dbias = np.array([de.sum()], dtype=dweight.dtype)
    dz = de[:, :, None] * weight
    return dz, dweight, dbias


def hypothesis(z_hat, z):
    """Average-pool the heatmap-weighted maps: ``H[c] = mean_i z_hat[i] z[i, c]``."""
    return nn.avgpool1d_global(z_hat[..., None] * z)


def hypothesis_backward(dh, z_hat, z):
    """Returns ``(dz_hat, dz)``."""
    length = z.shape[1]
    dz_hat = np.einsum("nc,nlc->nl", dh, z) / length
    dz = z_hat[:, :, None] * dh[:, None, :] / length
    return dz_hat, dz


def confidence_gate(h, w_c):
    return np.tanh(h @ w_c)


# ----------------------------------------------------------------- model


class AttentionCnnModel:
    def __init__(self, config: AttentionCnnConfig, bands: int):
        self.config = config
        self.bands = bands
        self.lengths = level_lengths(bands, config)
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        cfg = config

        self.blocks: list[Block] = []
        c_in = 1
        for i in range(cfg.num_blocks):
            c_out = cfg.channels[i]
            fan = c_in * cfg.conv_k
            blk = Block(
                conv_w=nn.Param(nn.uniform_init(rng, (c_out, c_in, cfg.conv_k), fan, dtype), f"block{i}.conv_w"),
                conv_b=nn.Param(np.zeros(c_out, dtype=dtype), f"block{i}.conv_b"),
                bn=nn.BatchNormState.create(c_out, dtype, f"block{i}.bn"),
            )
            if cfg.use_attention:
                blk.att_w = nn.Param(nn.uniform_init(rng, (c_out,), c_out, dtype), f"block{i}.att_w")
                blk.att_b = nn.Param(np.zeros(1, dtype=dtype), f"block{i}.att_b")
                blk.w_o = nn.Param(nn.uniform_init(rng, (c_out, cfg.num_classes), c_out, dtype), f"block{i}.w_o")
                blk.w_c = nn.Param(nn.uniform_init(rng, (c_out, 1), c_out, dtype), f"block{i}.w_c")
            self.blocks.append(blk)
            c_in = c_out

        self.flat_dim = self.lengths[-1] * cfg.channels[cfg.num_blocks - 1]
        self.head: list[tuple[nn.Param, nn.Param]] = []
        fan = self.flat_dim
        for j, width in enumerate(list(cfg.hidden) + [cfg.num_classes]):
            w = nn.Param(nn.uniform_init(rng, (fan, width), fan, dtype), f"head{j}.w")
            b = nn.Param(np.zeros(width, dtype=dtype), f"head{j}.b")
            self.head.append((w, b))
            fan = width
        self.w_cnet = None
        if cfg.use_attention:
            self.w_cnet = nn.Param(nn.uniform_init(rng, (self.flat_dim, 1), self.flat_dim, dtype), "head.w_cnet")

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self):
        """All trainable Params in declaration order."""
        out = []
        for blk in self.blocks:
            out += [blk.conv_w, blk.conv_b, blk.bn.gamma, blk.bn.beta]
            if blk.att_w is not None:
                out += [blk.att_w, blk.att_b, blk.w_o, blk.w_c]
        for w, b in self.head:
            out += [w, b]
        if self.w_cnet is not None:
            out.append(self.w_cnet)
        return out

    def attention_parameters(self):
        out = []
        for blk in self.blocks:
            if blk.att_w is not None:
                out += [blk.att_w, blk.att_b, blk.w_o, blk.w_c]
        if self.w_cnet is not None:
            out.append(self.w_cnet)
        return out

    def buffers(self):
        """Non-trainable state (batch-norm running statistics)."""
        out = []
        for i, blk in enumerate(self.blocks):
            out.append((f"block{i}.bn.running_mean", blk.bn.running_mean))
            out.append((f"block{i}.bn.running_var", blk.bn.running_var))
        return out

    def state_arrays(self):
        return [(p.name, p.value) for p in self.parameters()] + self.buffers()

    def snapshot(self):
        return [a.copy() for _, a in self.state_arrays()]

    def restore(self, snap):
        for (_, a), s in zip(self.state_arrays(), snap):
            a[...] = s

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward / backward ----------------------------------------------

    def forward(self, x, train=False):
        """Run a batch of spectra (N, b) through the network."""
        cfg = self.config
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.bands:
            raise ValueError(f"expected {self.bands} bands, got {x.shape[1]}")
        dtype = self.blocks[0].conv_w.value.dtype
        h = x.astype(dtype, copy=False)[:, :, None]
        rec = ForwardRecord()
        caches = []
        logits = 0
        for blk in self.blocks:
            a, cols = nn.conv1d(h, blk.conv_w.value, blk.conv_b.value, 1, cfg.conv_padding,
                                return_cols=True)
            r = nn.relu(a)
            s, bn_cache = nn.batchnorm1d(r, blk.bn, train)
            z, idx = nn.maxpool1d(s, cfg.pool_k, cfg.pool_stride)
            caches.append(dict(x=h, cols=cols, a=a, bn=bn_cache, s_len=s.shape[1], idx=idx))
            rec.z.append(z)
            if cfg.use_attention:
                z_hat, pre = attention_estimator(z, blk.att_w.value, blk.att_b.value)
                hyp = hypothesis(z_hat, z)
                o = hyp @ blk.w_o.value
                c = confidence_gate(hyp, blk.w_c.value)
                caches[-1]["pre"] = pre
                rec.z_hat.append(z_hat)
                rec.h.append(hyp)
                rec.o.append(o)
                rec.c.append(c)
                logits = logits + c * o
            h = z
        f = h.reshape(h.shape[0], -1)
        acts = [f]
        u = f
        for j, (w, b) in enumerate(self.head):
            u = nn.linear(u, w.value, b.value)
            if j < len(self.head) - 1:
                acts.append(u)
                u = nn.relu(u)
        rec.o_net = u
        if cfg.use_attention:
            rec.c_net = np.tanh(f @ self.w_cnet.value)
            logits = logits + rec.o_net * rec.c_net
        else:
            logits = rec.o_net
        rec.output = nn.softmax(logits, axis=1)
        rec._cache = dict(blocks=caches, acts=acts, f=f, train=train)
        return rec

    def backward(self, rec: ForwardRecord, labels, need_input_grad=False):
        """Accumulate NLL-loss gradients into every Param.

        Returns d(loss)/d(input) when ``need_input_grad`` is set, else ``None``.
        """
        if not rec._cache.get("train"):
            raise RuntimeError("backward needs a train-mode forward record")
        cfg = self.config
        dprobs = nn.nll_loss_backward(rec.output, labels)
        dlogits = nn.softmax_backward(dprobs, rec.output, axis=1)
        cache = rec._cache
        f = cache["f"]

        df = np.zeros_like(f)
        if cfg.use_attention:
            do_net = dlogits * rec.c_net
            dc = (dlogits * rec.o_net).sum(axis=1, keepdims=True) * (1 - rec.c_net ** 2)
            self.w_cnet.grad += f.T @ dc
            df += dc @ self.w_cnet.value.T
        else:
            do_net = dlogits

        du = do_net
        acts = cache["acts"]
        for j in range(len(self.head) - 1, -1, -1):
            w, b = self.head[j]
            inp = acts[j] if j == 0 else nn.relu(acts[j])
            dx, dw, db = nn.linear_backward(du, inp, w.value)
            w.grad += dw
            b.grad += db
            du = dx if j == 0 else nn.relu_backward(dx, acts[j])
        df += du

        dz = df.reshape(rec.z[-1].shape)
        for i in range(len(self.blocks) - 1, -1, -1):
            blk = self.blocks[i]
            bc = cache["blocks"][i]
            z = rec.z[i]
            if cfg.use_attention:
                z_hat, hyp, o, c = rec.z_hat[i], rec.h[i], rec.o[i], rec.c[i]
                do = dlogits * c
                dcg = (dlogits * o).sum(axis=1, keepdims=True) * (1 - c ** 2)
                blk.w_o.grad += hyp.T @ do
                blk.w_c.grad += hyp.T @ dcg
                dh = do @ blk.w_o.value.T + dcg @ blk.w_c.value.T
                dz_hat, dz_h = hypothesis_backward(dh, z_hat, z)
                dz_e, dwa, dba = attention_estimator_backward(dz_hat, z_hat, bc["pre"], z, blk.att_w.value)
                blk.att_w.grad += dwa
                blk.att_b.grad += dba
                dz = dz + dz_h + dz_e
            ds = nn.maxpool1d_backward(dz, bc["idx"], bc["s_len"], cfg.pool_k, cfg.pool_stride)
            dr, dgamma, dbeta = nn.batchnorm1d_backward(ds, bc["bn"], blk.bn)
            blk.bn.gamma.grad += dgamma
            blk.bn.beta.grad += dbeta
            da = nn.relu_backward(dr, bc["a"])
            dx, dk, dbias = nn.conv1d_backward(da, bc["x"], blk.conv_w.value, 1, cfg.conv_padding,
                                               cols=bc["cols"], need_dx=i > 0 or need_input_grad)
            blk.conv_w.grad += dk
            blk.conv_b.grad += dbias
            dz = dx
        return dz[:, :, 0] if dz is not None else None

    def loss(self, x, labels, train=True):
        rec = self.forward(x, train=train)
        return nn.nll_loss(rec.output, labels), rec

    def predict_proba(self, x, batch_size=1024):
        x = np.asarray(x)
        out = [self.forward(x[i:i + batch_size]).output for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))

    def predict(self, x, batch_size=1024):
        return self.predict_proba(x, batch_size).argmax(axis=1)


def build_model(config: AttentionCnnConfig, bands: int) -> AttentionCnnModel:
    return AttentionCnnModel(config, bands)


# ---------------------------------------------------------------- training


@dataclass
class History:
    loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = float("-inf")
    stopped_early: bool = False
    seconds: float = 0.0

    @property
    def epochs(self):
        return len(self.loss)

    def rows(self):
        for i, (l, ta, va) in enumerate(zip(self.loss, self.train_acc, self.val_acc), start=1):
            yield dict(epoch=i, loss=l, train_acc=ta, val_acc=va)


def accuracy(model, x, y, batch_size=1024):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(model.predict(x, batch_size) == np.asarray(y)))


def _batches(order, batch_size):
    n = len(order)
    starts = list(range(0, n, batch_size))
    # a trailing single sample cannot be batch-normalised; fold it into the previous batch
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    for k, s in enumerate(starts):
        end = starts[k + 1] if k + 1 < len(starts) else n
        yield order[s:end]


def train(model, x_train, y_train, x_val, y_val, batch_size=64, patience=25,
          max_epochs=200, lr=1e-3, beta1=0.9, beta2=0.999, seed=None):
    """Mini-batch ADAM training with early stopping on validation accuracy.

    Training stops once ``patience`` consecutive epochs fail to beat the best
    validation accuracy (or at ``max_epochs``).  The model is left holding
    the best-epoch weights.
    """
    x_train, y_train = np.asarray(x_train), np.asarray(y_train)
    x_val, y_val = np.asarray(x_val), np.asarray(y_val)
    if len(y_train) < 2 or len(y_val) == 0:
        raise ValueError("training needs >= 2 train samples and a non-empty validation set")
    nc = model.config.num_classes
    for name, y in (("train", y_train), ("validation", y_val)):
        if y.min() < 0 or y.max() >= nc:
            raise ValueError(f"{name} labels out of range for {nc} classes")

    rng = np.random.default_rng(model.config.seed if seed is None else seed)
    opt = nn.Adam(model.parameters(), lr=lr, beta1=beta1, beta2=beta2)
    hist = History()
    best = model.snapshot()
    t0 = time.perf_counter()
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(y_train))
        total, correct, seen = 0.0, 0, 0
        for bi, idx in enumerate(_batches(order, batch_size)):
            xb, yb = x_train[idx], y_train[idx]
            loss, rec = model.loss(xb, yb, train=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {bi}",
                    dict(epoch=epoch, batch=bi, loss=loss, history=hist),
                )
            model.backward(rec, yb)
            opt.step()
            total += loss * len(idx)
            correct += int((rec.output.argmax(axis=1) == yb).sum())
            seen += len(idx)
        val_acc = accuracy(model, x_val, y_val)
        hist.loss.append(total / seen)
        hist.train_acc.append(correct / seen)
        hist.val_acc.append(val_acc)
        log.debug("epoch %d loss %.4f train %.4f val %.4f", epoch, total / seen, correct / seen, val_acc)
        if val_acc > hist.best_val_acc:
            hist.best_val_acc = val_acc
            hist.best_epoch = epoch
            best = model.snapshot()
        elif epoch - hist.best_epoch >= patience:
            hist.stopped_early = True
            break
    model.restore(best)
    hist.seconds = time.perf_counter() - t0
    return model, hist


# ---------------------------------------------------------------- heatmaps


def upsample_matrix(length, bands):
    """Linear-interpolation operator mapping a length-L signal onto b points.

    Both endpoints are anchored: source sample 0 lands on band 0 and sample
    L-1 on band b-1.
    """
    if length == 1:
        return np.ones((1, bands))
    src = np.linspace(0.0, 1.0, length)
    dst = np.linspace(0.0, 1.0, bands)
    eye = np.eye(length)
    return np.stack([np.interp(dst, src, eye[i]) for i in range(length)])


def upsample_heatmap(z_hat, bands):
    """Interpolate heatmap(s) (..., L) to (..., b) and renormalise to sum 1."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    up = z_hat @ upsample_matrix(z_hat.shape[-1], bands)
    return up / up.sum(axis=-1, keepdims=True)


def per_sample_heatmaps(model, x, batch_size=1024):
    """Level-averaged, band-resolution heatmap for every sample: (N, b)."""
    if not model.config.use_attention:
        raise ValueError("heatmaps need a model trained with attention")
    x = np.asarray(x)
    mats = [upsample_matrix(L, model.bands) for L in model.lengths]
    out = []
    for i in range(0, len(x), batch_size):
        rec = model.forward(x[i:i + batch_size])
        acc = 0
        for z_hat, m in zip(rec.z_hat, mats):
            up = z_hat.astype(np.float64) @ m
            acc = acc + up / up.sum(axis=1, keepdims=True)
        out.append(acc / len(mats))
    return np.concatenate(out) if out else np.zeros((0, model.bands))


def extract_heatmap(model, x, labels=None, class_filter=None, provenance=()):
    """Average attention heatmap over a dataset (optionally one class)."""
    x = np.asarray(x)
    if class_filter is not None:
        if labels is None:
            raise ValueError("class filter needs labels")
        x = x[np.asarray(labels) == class_filter]
    if len(x) == 0:
        raise ValueError("no samples to build a heatmap from")
    scores = per_sample_heatmaps(model, x).mean(axis=0)
    return Heatmap(scores / scores.sum(), tuple(provenance))
