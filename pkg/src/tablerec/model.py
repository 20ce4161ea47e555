"""The multi-task table recognition network.

One shared convolutional encoder turns the image into a positionally-encoded
feature sequence; one shared transformer decoder consumes the (right-shifted)
structure token stream; three heads branch off it: a structure classifier,
a per-cell bounding-box regressor and a per-cell character decoder.  Cell
heads are driven by the shared-decoder outputs at cell-trigger positions, so
one backward pass sends all three tasks' gradients through the shared parts.

Every decoder block is the same "identical layer": causal multi-head
self-attention, cross-attention over the encoder memory, and a position-wise
feed-forward network, each sub-layer wrapped in residual + layer norm
(post-norm).
"""

from __future__ import annotations

import json
import math
import struct as struct_mod
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Adam, AdamState, Tape, Tensor
from .vocab import PAD_ID

NEG_INF = float("-inf")


@dataclass
class ModelConfig:
    image_size: tuple[int, int, int] = (160, 160, 1)
    d_model: int = 128
    ff_size: int = 256
    n_heads: int = 4
    n_shared_layers: int = 2
    max_struct_len: int = 140
    max_cell_len: int = 16
    struct_vocab_size: int = 32
    content_vocab_size: int = 99
    backbone_channels: tuple[int, ...] = (16, 48, 128)
    backbone_strides: tuple[int, ...] = (2, 2, 2)
    backbone_blocks: int = 1
    use_global_context: bool = True
    lambda_struct: float = 1.0
    lambda_content: float = 1.0
    lambda_bbox: float = 1.0
    dtype: str = "float32"

    def validate(self) -> None:
        h, w, c = self.image_size
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ValueError("backbone channels and strides must have equal length")
        stride = self.total_stride()
        if h % stride or w % stride:
            raise ValueError(f"total backbone stride {stride} must divide image {h}x{w}")
        if self.backbone_channels[-1] != self.d_model:
            raise ValueError("last backbone channel width must equal d_model")
        if self.max_struct_len < 2 or self.max_cell_len < 2:
            raise ValueError("sequence caps must leave room for SOS/EOS")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    def total_stride(self) -> int:
        s = 1
        for v in self.backbone_strides:
            s *= v
        return s

    def grid_size(self) -> tuple[int, int]:
        h, w, _ = self.image_size
        s = self.total_stride()
        return h // s, w // s

    def memory_len(self) -> int:
        gh, gw = self.grid_size()
        return gh * gw

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def param_count(self) -> int:
        """Closed-form parameter count; verified against the live manifest."""
        d, ff = self.d_model, self.ff_size
        total = 0
        c_in = self.image_size[2]
        for c_out in self.backbone_channels:
            total += c_out * c_in * 9 + 2 * c_out                      # down conv + norm
            total += self.backbone_blocks * (2 * (c_out * c_out * 9) + 4 * c_out)
            if self.use_global_context:
                cr = max(1, c_out // 4)
                total += c_out * cr + cr + cr * c_out + c_out          # bottleneck
            c_in = c_out
        total += (self.struct_vocab_size + self.content_vocab_size) * d
        per_layer = 8 * d * d + 8 * d + 2 * d * ff + ff + d + 6 * d    # attn + ffn + 3 norms
        total += (self.n_shared_layers + 3) * per_layer
        total += d * self.struct_vocab_size + self.struct_vocab_size
        total += d * 4 + 4
        total += d * self.content_vocab_size + self.content_vocab_size
        return total


TINY_CONFIG = ModelConfig(
    image_size=(16, 16, 1), d_model=16, ff_size=32, n_heads=2, n_shared_layers=2,
    max_struct_len=48, max_cell_len=8, backbone_channels=(8, 16),
    backbone_strides=(2, 2), backbone_blocks=1, use_global_context=True,
)

PAPER_CONFIG = ModelConfig(
    image_size=(480, 480, 3), d_model=512, ff_size=2048, n_heads=8, n_shared_layers=2,
    max_struct_len=500, max_cell_len=150, backbone_channels=(64, 128, 512),
    backbone_strides=(2, 2, 2), backbone_blocks=1, use_global_context=True,
)


@dataclass
class EncoderMemory:
    """Flattened, positionally-encoded feature sequence (one per image)."""

    seq: Tensor            # (grid_h * grid_w, d_model)
    grid_h: int
    grid_w: int


def _truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """(name -> shape, kind) manifest; kind is weight/bias/gain."""
    shapes: dict[str, tuple] = {}

    def weight(name, *shape):
        shapes[name] = (shape, "weight")

    def bias(name, *shape):
        shapes[name] = (shape, "bias")

    def norm(prefix, *shape):
        shapes[prefix + ".gain"] = (shape, "gain")
        shapes[prefix + ".bias"] = (shape, "bias")

    c_in = config.image_size[2]
    for i, c_out in enumerate(config.backbone_channels):
        weight(f"enc.stage{i}.down.w", c_out, c_in, 3, 3)
        norm(f"enc.stage{i}.down.norm", c_out, 1)
        for j in range(config.backbone_blocks):
            weight(f"enc.stage{i}.res{j}.conv1.w", c_out, c_out, 3, 3)
            norm(f"enc.stage{i}.res{j}.norm1", c_out, 1)
            weight(f"enc.stage{i}.res{j}.conv2.w", c_out, c_out, 3, 3)
            norm(f"enc.stage{i}.res{j}.norm2", c_out, 1)
        if config.use_global_context:
            cr = max(1, c_out // 4)
            weight(f"enc.stage{i}.gc.w1", c_out, cr)
            bias(f"enc.stage{i}.gc.b1", cr)
            weight(f"enc.stage{i}.gc.w2", cr, c_out)
            bias(f"enc.stage{i}.gc.b2", c_out)
        c_in = c_out

    d = config.d_model
    weight("emb.struct", config.struct_vocab_size, d)
    weight("emb.content", config.content_vocab_size, d)

    layer_prefixes = [f"dec.shared{i}" for i in range(config.n_shared_layers)]
    layer_prefixes += ["dec.struct", "dec.bbox", "dec.content"]
    for p in layer_prefixes:
        for sub in ("self", "cross"):
            for m in ("q", "k", "v", "o"):
                weight(f"{p}.{sub}.w{m}", d, d)
                bias(f"{p}.{sub}.b{m}", d)
            norm(f"{p}.{sub}.norm", d)
        weight(f"{p}.ffn.w1", d, config.ff_size)
        bias(f"{p}.ffn.b1", config.ff_size)
        weight(f"{p}.ffn.w2", config.ff_size, d)
        bias(f"{p}.ffn.b2", d)
        norm(f"{p}.ffn.norm", d)

    weight("head.struct.w", d, config.struct_vocab_size)
    bias("head.struct.b", config.struct_vocab_size)
    weight("head.bbox.w", d, 4)
    bias("head.bbox.b", 4)
    weight("head.content.w", d, config.content_vocab_size)
    bias("head.content.b", config.content_vocab_size)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Truncated-normal (std 0.02) weights, zero biases, unit norm gains."""
    dtype = config.np_dtype()
    params: dict[str, Tensor] = {}
    for name, (shape, kind) in parameter_shapes(config).items():
        if kind == "weight":
            arr = _truncated_normal(rng, shape, 0.02, dtype)
        elif kind == "gain":
            arr = np.ones(shape, dtype=dtype)
        else:
            arr = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return params


class TableModel:
    """Parameter container plus the forward passes of all five components."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 params: dict[str, Tensor] | None = None):
        config.validate()
        self.config = config
        self.dtype = config.np_dtype()
        if params is None:
            if rng is None:
                rng = np.random.default_rng(0)
            params = init_params(config, rng)
        self.params = params
        self._pe: dict[int, np.ndarray] = {}
        self._masks: dict[int, np.ndarray] = {}

    # -- small helpers ------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _pe_table(self, length: int) -> np.ndarray:
        have = self._pe.get(0)
        if have is None or have.shape[0] < length:
            cap = max(length, self.config.max_struct_len, self.config.max_cell_len,
                      self.config.memory_len())
            self._pe[0] = T.sinusoidal_encoding(cap, self.config.d_model, dtype=self.dtype)
        return self._pe[0][:length]

    def _causal_mask(self, t: int) -> np.ndarray:
        m = self._masks.get(t)
        if m is None:
            m = np.where(np.triu(np.ones((t, t), dtype=bool), k=1), NEG_INF, 0.0).astype(self.dtype)
            self._masks[t] = m
        return m

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return T.add(T.matmul(x, self._p(prefix + ".w")), self._p(prefix + ".b"))

    def _attention(self, prefix: str, query_in: Tensor, kv_in: Tensor,
                   mask: np.ndarray | None) -> Tensor:
        d = self.config.d_model
        hn = self.config.n_heads
        dh = d // hn

        def project(x, m):
            return T.add(T.matmul(x, self._p(f"{prefix}.w{m}")), self._p(f"{prefix}.b{m}"))

        def split_heads(x):
            t = x.shape[-2]
            x = T.reshape(x, x.shape[:-1] + (hn, dh))
            return T.swap_axes(x, -3, -2)  # (..., heads, t, dh)

        q = split_heads(project(query_in, "q"))
        k = split_heads(project(kv_in, "k"))
        v = split_heads(project(kv_in, "v"))
        scores = T.scale(T.matmul(q, T.swap_axes(k, -1, -2)), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = T.add(scores, Tensor(mask))
        attn = T.softmax(scores, axis=-1)
        ctx = T.swap_axes(T.matmul(attn, v), -3, -2)
        ctx = T.reshape(ctx, ctx.shape[:-2] + (d,))
        return T.add(T.matmul(ctx, self._p(f"{prefix}.wo")), self._p(f"{prefix}.bo"))

    def _sublayer_norm(self, prefix: str, x: Tensor, delta: Tensor) -> Tensor:
        return T.layer_norm(T.add(x, delta), self._p(prefix + ".gain"), self._p(prefix + ".bias"))

    def _identical_layer(self, prefix: str, x: Tensor, memory_seq: Tensor,
                         self_mask: np.ndarray | None) -> Tensor:
        x = self._sublayer_norm(f"{prefix}.self.norm", x,
                                self._attention(f"{prefix}.self", x, x, self_mask))
        x = self._sublayer_norm(f"{prefix}.cross.norm", x,
                                self._attention(f"{prefix}.cross", x, memory_seq, None))
        h = T.add(T.matmul(x, self._p(f"{prefix}.ffn.w1")), self._p(f"{prefix}.ffn.b1"))
        h = T.add(T.matmul(T.relu(h), self._p(f"{prefix}.ffn.w2")), self._p(f"{prefix}.ffn.b2"))
        return self._sublayer_norm(f"{prefix}.ffn.norm", x, h)

    # -- encoder ------------------------------------------------------------

    def _channel_norm(self, x: Tensor, prefix: str) -> Tensor:
        c, hh, ww = x.shape
        flat = T.reshape(x, (c, hh * ww))
        flat = T.layer_norm(flat, self._p(prefix + ".gain"), self._p(prefix + ".bias"))
        return T.reshape(flat, (c, hh, ww))

    def encode(self, image: np.ndarray) -> EncoderMemory:
        """Run the backbone and unfold the feature grid column by column
        (left to right), then add sinusoidal position encoding."""
        expected = self.config.image_size
        if tuple(image.shape) != tuple(expected):
            raise ValueError(f"image shape {image.shape} does not match config {expected}")
        x = Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=self.dtype)
        for i, (c_out, stride) in enumerate(zip(self.config.backbone_channels,
                                                self.config.backbone_strides)):
            x = T.conv2d(x, self._p(f"enc.stage{i}.down.w"), None, stride=stride, padding=1)
            x = T.relu(self._channel_norm(x, f"enc.stage{i}.down.norm"))
            for j in range(self.config.backbone_blocks):
                y = T.conv2d(x, self._p(f"enc.stage{i}.res{j}.conv1.w"), None, 1, 1)
                y = T.relu(self._channel_norm(y, f"enc.stage{i}.res{j}.norm1"))
                y = T.conv2d(y, self._p(f"enc.stage{i}.res{j}.conv2.w"), None, 1, 1)
                y = self._channel_norm(y, f"enc.stage{i}.res{j}.norm2")
                x = T.relu(T.add(x, y))
            if self.config.use_global_context:
                pooled = T.reshape(T.mean_axes(x, (1, 2)), (1, c_out))
                z = T.relu(T.add(T.matmul(pooled, self._p(f"enc.stage{i}.gc.w1")),
                                 self._p(f"enc.stage{i}.gc.b1")))
                a = T.add(T.matmul(z, self._p(f"enc.stage{i}.gc.w2")),
                          self._p(f"enc.stage{i}.gc.b2"))
                x = T.add(x, T.reshape(a, (c_out, 1, 1)))
        k, gh, gw = x.shape
        seq = T.reshape(T.transpose(x, (2, 1, 0)), (gw * gh, k))
        seq = T.add(seq, Tensor(self._pe_table(gw * gh)))
        return EncoderMemory(seq=seq, grid_h=gh, grid_w=gw)

    # -- decoders -----------------------------------------------------------

    def shared_decode(self, memory: EncoderMemory, struct_ids: np.ndarray) -> Tensor:
        """Hidden states (T, d) for a right-shifted structure id sequence."""
        struct_ids = np.asarray(struct_ids, dtype=np.int64)
        t = struct_ids.shape[0]
        if t > self.config.max_struct_len:
            raise ValueError(f"structure sequence length {t} exceeds cap {self.config.max_struct_len}")
        if np.any(struct_ids < 0) or np.any(struct_ids >= self.config.struct_vocab_size):
            raise ValueError("structure ids outside vocabulary")
        x = T.scale(T.take_rows(self._p("emb.struct"), struct_ids), math.sqrt(self.config.d_model))
        x = T.add(x, Tensor(self._pe_table(t)))
        mask = self._causal_mask(t)
        for i in range(self.config.n_shared_layers):
            x = self._identical_layer(f"dec.shared{i}", x, memory.seq, mask)
        return x

    def structure_head(self, hidden: Tensor, memory: EncoderMemory) -> Tensor:
        """Structure token logits (T, struct_vocab_size)."""
        t = hidden.shape[0]
        x = self._identical_layer("dec.struct", hidden, memory.seq, self._causal_mask(t))
        return self._linear(x, "head.struct")

    def bbox_head(self, cell_hidden: Tensor, memory: EncoderMemory) -> Tensor:
        """Per-cell (x0, y0, x1, y1) in (0, 1); cells are independent
        length-1 queries, so each row depends only on its own hidden state."""
        n = cell_hidden.shape[0]
        x = T.reshape(cell_hidden, (n, 1, self.config.d_model))
        x = self._identical_layer("dec.bbox", x, memory.seq, None)
        x = T.reshape(x, (n, self.config.d_model))
        return T.sigmoid(self._linear(x, "head.bbox"))

    def content_decode(self, memory: EncoderMemory, cell_hidden: Tensor,
                       char_ids: np.ndarray) -> Tensor:
        """Character logits (n_cells, L, content_vocab_size) under teacher
        forcing; the cell's shared-decoder output is added at every position."""
        char_ids = np.asarray(char_ids, dtype=np.int64)
        n, length = char_ids.shape
        if length > self.config.max_cell_len:
            raise ValueError(f"cell sequence length {length} exceeds cap {self.config.max_cell_len}")
        x = T.scale(T.take_rows(self._p("emb.content"), char_ids), math.sqrt(self.config.d_model))
        x = T.add(x, Tensor(self._pe_table(length)))
        x = T.add(x, T.reshape(cell_hidden, (n, 1, self.config.d_model)))
        x = self._identical_layer("dec.content", x, memory.seq, self._causal_mask(length))
        return self._linear(x, "head.content")

    # -- losses -------------------------------------------------------------

    def total_loss(self, struct_logits: Tensor, struct_targets: np.ndarray,
                   bbox_preds: Tensor | None, bbox_targets: np.ndarray,
                   bbox_mask: np.ndarray, content_logits: Tensor | None,
                   content_targets: np.ndarray):
        """Weighted multi-task loss; returns (total, parts) with parts raw."""
        cfg = self.config
        l_struct = T.cross_entropy(struct_logits, struct_targets, ignore_id=PAD_ID)
        if content_logits is not None:
            n, length, v = content_logits.shape
            if content_targets.shape != (n, length):
                raise ValueError(f"content targets {content_targets.shape} misaligned with logits {(n, length)}")
            l_content = T.cross_entropy(T.reshape(content_logits, (n * length, v)),
                                        content_targets.reshape(-1), ignore_id=PAD_ID)
        else:
            l_content = Tensor(np.asarray(0.0, dtype=self.dtype))
        if bbox_preds is not None:
            if bbox_targets.shape != bbox_preds.shape or bbox_mask.shape[0] != bbox_preds.shape[0]:
                raise ValueError("bbox supervision misaligned with predictions")
            l_bbox = T.l1_loss(bbox_preds, bbox_targets, mask=bbox_mask[:, None])
        else:
            l_bbox = Tensor(np.asarray(0.0, dtype=self.dtype))
        total = T.add(T.add(T.scale(l_struct, cfg.lambda_struct),
                            T.scale(l_content, cfg.lambda_content)),
                      T.scale(l_bbox, cfg.lambda_bbox))
        return total, {"struct": l_struct, "content": l_content, "bbox": l_bbox}

    def forward_sample(self, pack) -> tuple[Tensor, dict[str, Tensor]]:
        """Teacher-forced forward of all three tasks for one SamplePack."""
        memory = self.encode(pack.image)
        hidden = self.shared_decode(memory, pack.struct_in)
        struct_logits = self.structure_head(hidden, memory)
        if pack.trigger_pos.shape[0] > 0:
            cell_hidden = T.take_rows(hidden, pack.trigger_pos)
            bbox_preds = self.bbox_head(cell_hidden, memory)
            content_logits = self.content_decode(memory, cell_hidden, pack.content_in)
        else:
            bbox_preds = None
            content_logits = None
        return self.total_loss(struct_logits, pack.struct_tgt, bbox_preds,
                               pack.bbox_tgt, pack.bbox_mask, content_logits,
                               pack.content_tgt)


def train_step(model: TableModel, batch, optimizer: Adam, lr: float | None = None) -> dict:
    """One teacher-forced step: forward all samples and tasks, one backward,
    one optimizer update.  Returns the per-part loss breakdown (batch means,
    accumulated in float64 so total == weighted sum of parts holds tightly)."""
    cfg = model.config
    part_sums = {"struct": 0.0, "content": 0.0, "bbox": 0.0}
    with Tape() as tape:
        totals = None
        for pack in batch.packs:
            total, parts = model.forward_sample(pack)
            totals = total if totals is None else T.add(totals, total)
            for key in part_sums:
                part_sums[key] += parts[key].item()
        loss = T.scale(totals, 1.0 / len(batch.packs))
    tape.backward(loss)
    optimizer.step(lr)
    optimizer.zero_grad()
    n = len(batch.packs)
    means = {k: v / n for k, v in part_sums.items()}
    logged_total = (cfg.lambda_struct * means["struct"]
                    + cfg.lambda_content * means["content"]
                    + cfg.lambda_bbox * means["bbox"])
    return {"loss": logged_total, "loss_struct": means["struct"],
            "loss_cont": means["content"], "loss_bbox": means["bbox"]}


# ---------------------------------------------------------------------------
# checkpoints: 8-byte little-endian header length, JSON header (config +
# manifest of name/shape/offset), then raw little-endian float32 blobs in
# manifest order.


def _config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    for key in ("image_size", "backbone_channels", "backbone_strides"):
        d[key] = list(d[key])
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    for key in ("image_size", "backbone_channels", "backbone_strides"):
        if key in d:
            d[key] = tuple(d[key])
    return ModelConfig(**d)


def save_checkpoint(path: str | Path, model: TableModel, optimizer: Adam | None = None,
                    step: int = 0, seed: int = 0) -> None:
    names = sorted(model.params)
    blobs: list[bytes] = []
    manifest = []
    offset = 0

    def push(name: str, arr: np.ndarray):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name in names:
        push(name, model.params[name].data)
    has_opt = optimizer is not None
    if has_opt:
        st = optimizer.state
        for name in names:
            push("opt.m:" + name, st.m[name])
        for name in names:
            push("opt.v:" + name, st.v[name])
    header = {
        "format": "tablerec-checkpoint-v1",
        "config": _config_to_dict(model.config),
        "step": int(step if not has_opt else optimizer.state.step_count),
        "seed": int(seed),
        "has_optimizer": has_opt,
        "manifest": manifest,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct_mod.pack("<Q", len(hjson)))
        fh.write(hjson)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[TableModel, AdamState | None, int, int]:
    with open(path, "rb") as fh:
        (hlen,) = struct_mod.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        body = fh.read()
    config = config_from_dict(header["config"])
    dtype = config.np_dtype()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr
    params = {name: Tensor(arr.astype(dtype), requires_grad=True)
              for name, arr in arrays.items() if not name.startswith("opt.")}
    expected = set(parameter_shapes(config))
    if set(params) != expected:
        missing = expected.symmetric_difference(params)
        raise ValueError(f"checkpoint manifest does not match config parameters: {sorted(missing)[:5]}")
    model = TableModel(config, params=params)
    state = None
    if header.get("has_optimizer"):
        state = AdamState(params)
        state.step_count = int(header["step"])
        for name in params:
            state.m[name] = arrays["opt.m:" + name].astype(np.float32).copy()
            state.v[name] = arrays["opt.v:" + name].astype(np.float32).copy()
    return model, state, int(header["step"]), int(header["seed"])
