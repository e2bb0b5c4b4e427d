"""Stage-2 integration: embedding transfer, decoder inheritance, training.

A :class:`CtrModel` assembles a flat feature vector from fixed slots
(user features, target item, target category, optional attention pool,
optional generative next-item prediction) and feeds a backbone.

Transfer mechanics:

* parameter sharing copies the pretrained item and category embedding
  tables into the CTR model (bit-exact at handoff, trainable afterwards);
* model inheritance additionally loads the decoder weights and the position
  table, and the decoder output g(s, c) occupies the last feature slot,
  fine-tuned end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, backward, clamp, concat, log, mul, mean, sigmoid
from .backbones import (
    BackboneConfig,
    backbone_forward,
    init_backbone_params,
    init_ta_params,
    target_attention,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Example
from .decoder import DecoderConfig, init_decoder_params, next_item_repr_batch
from .embeddings import EMBED_DIM, VocabSpec, init_tables
from .metrics import auc as auc_metric
from .metrics import logloss as logloss_metric

LOGIT_CLAMP = 30.0  # keeps sigmoid strictly inside (0, 1)

PS_TABLES = ("emb.item", "emb.category")
MI_EXTRA = ("emb.position",)


class IntegrationError(ValueError):
    """Invalid integration configuration or transfer request."""


@dataclass(frozen=True)
class IntegrationConfig:
    backbone: str = "dnn"
    decoder_attached: bool = False
    ps: bool = False
    mi: bool = False
    pretrain_mode: str | None = None  # cs+cd | cs+sd | rs+cd | rs+sd | None
    freeze_transferred: bool = False

    def validate(self) -> None:
        from .backbones import BACKBONE_KINDS

        if self.backbone not in BACKBONE_KINDS:
            raise IntegrationError(
                f"unknown backbone {self.backbone!r}; expected one of {BACKBONE_KINDS}"
            )
        if self.mi and not self.decoder_attached:
            raise IntegrationError("model inheritance requires the decoder to be attached")
        if self.pretrain_mode is None and (self.ps or self.mi):
            raise IntegrationError("PS/MI need a pretrain mode (no pretrained model configured)")

    @property
    def decoder_mode(self) -> str:
        """Decoder flavor the attached decoder runs in ("cd" or "sd")."""
        if self.mi and self.pretrain_mode is not None:
            return self.pretrain_mode.split("+")[1]
        return "cd"


@dataclass
class Batch:
    user_feats: np.ndarray  # (B, F)
    items: np.ndarray  # (B,)
    cats: np.ndarray  # (B,)
    seq_items: np.ndarray  # (B, L) padded
    seq_cats: np.ndarray  # (B, L)
    lengths: np.ndarray  # (B,)
    labels: np.ndarray  # (B,) float

    @property
    def size(self) -> int:
        return self.items.size


def make_batch(examples: list[Example]) -> Batch:
    B = len(examples)
    F = len(examples[0].user_features)
    lengths = np.array([ex.seq_len for ex in examples], dtype=np.int64)
    L = int(lengths.max()) if B else 0
    seq_items = np.zeros((B, L), dtype=np.int64)
    seq_cats = np.zeros((B, L), dtype=np.int64)
    for i, ex in enumerate(examples):
        seq_items[i, : ex.seq_len] = ex.behavior_items
        seq_cats[i, : ex.seq_len] = ex.behavior_cats
    return Batch(
        user_feats=np.array([ex.user_features for ex in examples], dtype=np.int64).reshape(B, F),
        items=np.array([ex.target_item for ex in examples], dtype=np.int64),
        cats=np.array([ex.target_category for ex in examples], dtype=np.int64),
        seq_items=seq_items,
        seq_cats=seq_cats,
        lengths=lengths,
        labels=np.array([ex.label for ex in examples], dtype=np.float64),
    )


class CtrModel:
    """A CTR backbone plus optional attention pool and attached decoder."""

    def __init__(
        self,
        vocab: VocabSpec,
        cfg: IntegrationConfig,
        rng: np.random.Generator,
        dec_cfg: DecoderConfig | None = None,
        dim: int = EMBED_DIM,
    ):
        cfg.validate()
        self.vocab = vocab
        self.cfg = cfg
        self.dim = dim
        self.dec_cfg = dec_cfg or DecoderConfig(model_dim=dim)
        if self.dec_cfg.model_dim != dim:
            raise IntegrationError("decoder model_dim must equal the embedding dim")

        self.n_user_feats = len(vocab.user_feature_cards)
        slots = self.n_user_feats + 2
        self.use_ta = cfg.backbone == "dcnv2_ta"
        if self.use_ta:
            slots += 1
        bb_kind = "dcnv2" if cfg.backbone == "dcnv2_ta" else cfg.backbone
        # the decoder prediction fuses late: into the final MLP stack's input
        # for the dnn, at the combination layer for the cross networks
        extra = 0
        if cfg.decoder_attached:
            if bb_kind == "dnn":
                slots += 1
            else:
                extra = dim
        self.bb_cfg = BackboneConfig(kind=bb_kind, input_width=slots * dim, combine_extra=extra)

        # init order is fixed: tables, backbone, attention, decoder
        self.tables = init_tables(vocab, dim, rng)
        self.bb_params = init_backbone_params(self.bb_cfg, rng)
        self.ta_params = init_ta_params(dim, rng) if self.use_ta else None
        self.dec_params = init_decoder_params(self.dec_cfg, rng) if cfg.decoder_attached else None
        self.transferred: set[str] = set()

    # -- parameters ---------------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        reg = {f"emb.{name}": t.weights for name, t in self.tables.items()}
        reg.update({f"bb.{name}": p for name, p in self.bb_params.items()})
        if self.ta_params is not None:
            reg.update({f"ta.{name}": p for name, p in self.ta_params.items()})
        if self.dec_params is not None:
            reg.update({f"dec.{name}": p for name, p in self.dec_params.items()})
        return reg

    def trainable_params(self) -> dict[str, Tensor]:
        reg = self.params()
        if self.cfg.freeze_transferred and self.transferred:
            reg = {k: v for k, v in reg.items() if k not in self.transferred}
        return reg

    # -- forward --------------------------------------------------------------
    def _sequence_tokens(self, batch: Batch) -> Tensor:
        L = batch.seq_items.shape[1]
        pos = np.maximum(batch.lengths[:, None] - 1 - np.arange(L)[None, :], 0)
        return (
            self.tables["item"].lookup(batch.seq_items)
            + self.tables["category"].lookup(batch.seq_cats)
            + self.tables["position"].lookup(pos)
        )

    def features(self, batch: Batch) -> Tensor:
        """Concatenate the base feature slots (everything except the g slot)."""
        item_e = self.tables["item"].lookup(batch.items)
        cat_e = self.tables["category"].lookup(batch.cats)
        slots = [
            self.tables[f"user{j}"].lookup(batch.user_feats[:, j])
            for j in range(self.n_user_feats)
        ]
        slots += [item_e, cat_e]
        if self.use_ta:
            slots.append(
                target_attention(
                    self.ta_params, item_e + cat_e, self._sequence_tokens(batch), batch.lengths
                )
            )
        return concat(slots, axis=-1)

    def _g_slot(self, batch: Batch, g_override: np.ndarray | None) -> Tensor:
        if g_override is not None:
            return Tensor(g_override)
        return next_item_repr_batch(
            self.tables,
            self.dec_params,
            self.dec_cfg,
            batch.seq_items,
            batch.seq_cats,
            batch.lengths,
            target_cats=batch.cats,
            mode=self.cfg.decoder_mode,
        )

    def forward(self, batch: Batch, g_override: np.ndarray | None = None) -> Tensor:
        """Click probabilities, strictly inside (0, 1)."""
        x = self.features(batch)
        extra = None
        if self.cfg.decoder_attached:
            g = self._g_slot(batch, g_override)
            if self.bb_cfg.kind == "dnn":
                x = concat([x, g], axis=-1)
            else:
                extra = g
        logit = backbone_forward(self.bb_cfg, self.bb_params, x, extra)
        return sigmoid(clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP))

    def predict_proba(self, example: Example) -> float:
        return float(self.forward(make_batch([example])).data[0])

    # -- persistence ------------------------------------------------------------
    def meta(self) -> dict[str, str]:
        m = {
            "kind": "ctr_model",
            "backbone": self.cfg.backbone,
            "decoder_attached": str(int(self.cfg.decoder_attached)),
            "ps": str(int(self.cfg.ps)),
            "mi": str(int(self.cfg.mi)),
            "pretrain_mode": self.cfg.pretrain_mode or "none",
            "dim": str(self.dim),
            "n_items": str(self.vocab.n_items),
            "n_categories": str(self.vocab.n_categories),
            "user_cards": ",".join(str(c) for c in self.vocab.user_feature_cards) or "-",
            "max_seq_len": str(self.vocab.max_seq_len),
        }
        m.update(self.dec_cfg.meta())
        return m

    def save(self, path) -> None:
        save_checkpoint(path, {k: v.data for k, v in self.params().items()}, self.meta())


def load_model(path) -> CtrModel:
    meta, arrays = load_checkpoint(path)
    cards = () if meta["user_cards"] == "-" else tuple(int(x) for x in meta["user_cards"].split(","))
    vocab = VocabSpec(int(meta["n_items"]), int(meta["n_categories"]), cards, int(meta["max_seq_len"]))
    cfg = IntegrationConfig(
        backbone=meta["backbone"],
        decoder_attached=bool(int(meta["decoder_attached"])),
        ps=bool(int(meta["ps"])),
        mi=bool(int(meta["mi"])),
        pretrain_mode=None if meta["pretrain_mode"] == "none" else meta["pretrain_mode"],
    )
    dec_cfg = DecoderConfig(
        n_layers=int(meta["dec_layers"]),
        n_heads=int(meta["dec_heads"]),
        model_dim=int(meta["dec_dim"]),
        ff_dim=int(meta["dec_ff"]),
    )
    model = CtrModel(vocab, cfg, np.random.default_rng(0), dec_cfg, dim=int(meta["dim"]))
    reg = model.params()
    missing = set(reg) - set(arrays)
    extra = set(arrays) - set(reg)
    if missing or extra:
        raise IntegrationError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, tensor in reg.items():
        if tensor.data.shape != arrays[name].shape:
            raise IntegrationError(
                f"checkpoint tensor {name} has shape {arrays[name].shape}, expected {tensor.data.shape}"
            )
        tensor.data = arrays[name].copy()
    return model


# -- transfer -----------------------------------------------------------------------

def apply_parameter_sharing(model: CtrModel, ckpt_arrays: dict[str, np.ndarray]) -> None:
    """Copy pretrained item/category tables into the model (stays trainable)."""
    mism = []
    for name in PS_TABLES:
        if name not in ckpt_arrays:
            raise IntegrationError(f"pretrained checkpoint lacks {name}")
        have = model.params()[name].data.shape
        want = ckpt_arrays[name].shape
        if have != want:
            mism.append(f"{name}: checkpoint {want} vs model {have}")
    if mism:
        raise IntegrationError("vocab mismatch: " + "; ".join(mism))
    for name in PS_TABLES:
        model.params()[name].data = ckpt_arrays[name].copy()
        model.transferred.add(name)


def apply_model_inheritance(
    model: CtrModel, ckpt_meta: dict[str, str], ckpt_arrays: dict[str, np.ndarray]
) -> None:
    """Load pretrained decoder weights (plus position table) into the model."""
    if not model.cfg.decoder_attached:
        raise IntegrationError("model inheritance requires the decoder to be attached")
    want = model.dec_cfg.meta()
    have = {k: ckpt_meta.get(k) for k in want}
    if have != want:
        raise IntegrationError(f"decoder config mismatch: checkpoint {have} vs model {want}")
    reg = model.params()
    dec_names = [k for k in reg if k.startswith("dec.")] + list(MI_EXTRA)
    for name in dec_names:
        if name not in ckpt_arrays:
            raise IntegrationError(f"pretrained checkpoint lacks {name}")
        if ckpt_arrays[name].shape != reg[name].data.shape:
            raise IntegrationError(
                f"decoder weight {name} has shape {ckpt_arrays[name].shape}, "
                f"expected {reg[name].data.shape}"
            )
    for name in dec_names:
        reg[name].data = ckpt_arrays[name].copy()
        model.transferred.add(name)


def apply_transfers(model: CtrModel, pretrained_ckpt_path) -> None:
    """Apply PS and/or MI from a pretrain checkpoint per the model's config."""
    if not (model.cfg.ps or model.cfg.mi):
        return
    if pretrained_ckpt_path is None:
        raise IntegrationError("PS/MI requested but no pretrained checkpoint given")
    meta, arrays = load_checkpoint(pretrained_ckpt_path)
    if model.cfg.pretrain_mode is not None and meta.get("mode") != model.cfg.pretrain_mode:
        raise IntegrationError(
            f"checkpoint was pretrained with mode {meta.get('mode')!r}, "
            f"config expects {model.cfg.pretrain_mode!r}"
        )
    if model.cfg.ps:
        apply_parameter_sharing(model, arrays)
    if model.cfg.mi:
        apply_model_inheritance(model, meta, arrays)


# -- training / evaluation --------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    lr: float = 0.001
    batch_size: int = 8
    seed: int = 0


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float | None = None

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1]


def bce_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    y = np.asarray(labels, dtype=np.float64)
    return mean(-(mul(log(probs), y) + mul(log(1.0 - probs), 1.0 - y)))


def train_ctr(
    model: CtrModel,
    examples: list[Example],
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> TrainLog:
    """Minimize mean cross entropy with Adam; deterministic per rng."""
    if not examples:
        raise ValueError("training set is empty")
    if rng is None:
        rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    opt = Adam(model.trainable_params(), lr=cfg.lr)
    log_out = TrainLog()
    n = len(examples)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            chunk = [examples[i] for i in order[start : start + cfg.batch_size]]
            batch = make_batch(chunk)
            loss = bce_loss(model.forward(batch), batch.labels)
            if log_out.initial_loss is None:
                log_out.initial_loss = loss.item()
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += loss.item() * batch.size
        log_out.epoch_losses.append(total / n)
    return log_out


@dataclass
class EvalResult:
    auc: float
    logloss: float
    n: int


def predict(model: CtrModel, examples: list[Example], batch_size: int = 256) -> np.ndarray:
    probs = np.empty(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        probs[start : start + len(chunk)] = model.forward(make_batch(chunk)).data
    return probs


def evaluate(model: CtrModel, examples: list[Example], batch_size: int = 256) -> EvalResult:
    if not examples:
        raise ValueError("evaluation set is empty")
    probs = predict(model, examples, batch_size)
    labels = np.array([ex.label for ex in examples])
    return EvalResult(auc=auc_metric(probs, labels), logloss=logloss_metric(probs, labels), n=len(examples))
