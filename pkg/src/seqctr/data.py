"""Dataset schema, file IO, and a synthetic generator with planted structure.

The corpus mirrors a four-part ad-log layout: a training set, a test set
drawn from a later logical day, a pretraining set of deduplicated user
histories, and a category-to-items sampling table built from the training
split.

The generator plants learnable structure so that model comparisons are
meaningful rather than noise:

* items carry latent vectors clustered by category;
* each user walks a category-level Markov chain and picks items within the
  category by affinity to their own latent vector;
* click labels mix a static user-item affinity term with a recency-weighted
  match between the behavior sequence and the target item, plus noise.

Scoring with the true (noiseless) click logit gives the practical AUC
ceiling; its value is recorded next to the generated files.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import VocabSpec

SCHEMA_MAGIC = "#seqctr-data"
SCHEMA_VERSION = "v1"


class DataFormatError(ValueError):
    """Raised for malformed dataset files; carries file and line context."""

    def __init__(self, path, lineno: int | None, message: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.lineno = lineno


@dataclass
class Example:
    """One impression: user profile, target item, behavior prefix, click."""

    user_id: int
    user_features: tuple[int, ...]
    target_item: int
    target_category: int
    behavior_items: np.ndarray
    behavior_cats: np.ndarray
    label: int

    @property
    def behavior(self) -> list[tuple[int, int]]:
        return list(zip(self.behavior_items.tolist(), self.behavior_cats.tolist()))

    @property
    def seq_len(self) -> int:
        return int(self.behavior_items.size)


@dataclass
class PretrainRecord:
    """One deduplicated user history for generative pretraining."""

    user_id: int
    user_features: tuple[int, ...]
    behavior_items: np.ndarray
    behavior_cats: np.ndarray

    @property
    def seq_len(self) -> int:
        return int(self.behavior_items.size)


CategoryItemTable = dict[int, np.ndarray]


@dataclass
class DatasetBundle:
    train: list[Example]
    test: list[Example]
    pretrain: list[PretrainRecord]
    cat_item_table: CategoryItemTable
    vocab: VocabSpec


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 2000
    n_items: int = 1000
    n_categories: int = 50
    n_train: int = 50_000
    n_test: int = 10_000
    seq_len_min: int = 30
    seq_len_max: int = 120
    max_seq_len: int = 200
    latent_dim: int = 8
    cat_spread: float = 1.0
    within_spread: float = 1.0
    markov_sharpness: float = 3.0
    self_loop_bonus: float = 1.5
    within_affinity: float = 5.0
    target_follow_prob: float = 0.6
    alpha: float = 2.5
    beta: float = 2.5
    recency_decay: float = 0.8
    click_bias: float = -1.0
    click_noise: float = 0.4
    train_day_frac: float = 0.8
    n_user_features: int = 3
    user_feature_buckets: int = 8
    seed: int = 0

    def __post_init__(self):
        if not (self.n_items >= self.n_categories >= 1):
            raise ValueError("need n_items >= n_categories >= 1")
        if self.n_users < 1 or self.n_train < 1 or self.n_test < 1:
            raise ValueError("counts must be positive")
        if not (2 <= self.seq_len_min <= self.seq_len_max):
            raise ValueError("need 2 <= seq_len_min <= seq_len_max")
        if not 0.0 < self.train_day_frac < 1.0:
            raise ValueError("train_day_frac must be in (0, 1)")

    def vocab(self) -> VocabSpec:
        cards = tuple([self.user_feature_buckets] * self.n_user_features)
        return VocabSpec(self.n_items, self.n_categories, cards, self.max_seq_len)


@dataclass
class PlantedOracle:
    """The generator's own scoring model; the Bayes-level reference."""

    user_latents: np.ndarray
    item_latents: np.ndarray
    item_units: np.ndarray
    config: GeneratorConfig

    def logit(self, ex: Example) -> float:
        c = self.config
        u = self.user_latents[ex.user_id]
        v = self.item_latents[ex.target_item]
        rm = self._recency_match(ex.behavior_items, ex.target_item)
        return float(c.click_bias + c.alpha * (u @ v) + c.beta * rm)

    def _recency_match(self, items: np.ndarray, target: int) -> float:
        if items.size == 0:
            return 0.0
        c = self.config
        gaps = np.arange(items.size - 1, -1, -1, dtype=np.float64)
        w = c.recency_decay**gaps
        sims = self.item_units[items] @ self.item_units[target]
        return float((w * sims).sum() / w.sum())

    def score_many(self, examples: list[Example]) -> np.ndarray:
        return np.array([self.logit(ex) for ex in examples])


@dataclass
class GeneratorReport:
    """Planted-signal statistics recorded at generation time."""

    oracle_auc_test: float
    oracle_auc_train: float
    base_rate_train: float
    base_rate_test: float
    cs_feasible_frac: float
    config: GeneratorConfig = field(repr=False, default=None)

    def to_json(self) -> str:
        payload = {
            "oracle_auc_test": self.oracle_auc_test,
            "oracle_auc_train": self.oracle_auc_train,
            "base_rate_train": self.base_rate_train,
            "base_rate_test": self.base_rate_test,
            "cs_feasible_frac": self.cs_feasible_frac,
            "config": dataclasses.asdict(self.config),
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _row_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _sample_rows(cum: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row given row-wise cumulative probabilities."""
    return (r[:, None] > cum).sum(axis=1)


def generate(config: GeneratorConfig) -> tuple[DatasetBundle, PlantedOracle, GeneratorReport]:
    """Build a full bundle plus the planted oracle, deterministically per seed."""
    from .metrics import auc as _auc

    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence(config.seed)))
    C, N, U, m = config.n_categories, config.n_items, config.n_users, config.latent_dim

    # latent geometry: category centers, items around them, user vectors
    cat_of_item = rng.permuted(np.arange(N) % C)
    centers = rng.normal(0.0, 1.0, size=(C, m)) * (config.cat_spread / np.sqrt(m))
    item_latents = centers[cat_of_item] + rng.normal(0.0, 1.0, size=(N, m)) * (
        config.within_spread / np.sqrt(m)
    )
    item_units = item_latents / np.linalg.norm(item_latents, axis=1, keepdims=True)
    user_latents = rng.normal(0.0, 1.0, size=(U, m)) / np.sqrt(m)

    # coarse profile features: quantile buckets of the first latent coordinates
    Q = config.user_feature_buckets
    user_feats = np.empty((U, config.n_user_features), dtype=np.int64)
    for j in range(config.n_user_features):
        coord = user_latents[:, j % m]
        ranks = np.argsort(np.argsort(coord, kind="mergesort"), kind="mergesort")
        user_feats[:, j] = ranks * Q // U

    # category-level Markov chain with a self-loop bonus
    trans_logits = rng.normal(0.0, 1.0, size=(C, C))
    trans_logits[np.diag_indices(C)] += config.self_loop_bonus
    trans = _row_softmax(config.markov_sharpness * trans_logits)
    trans_cum = np.cumsum(trans, axis=1)

    items_by_cat = [np.flatnonzero(cat_of_item == c) for c in range(C)]
    affinity = user_latents @ item_latents.T  # (U, N)

    # behavior streams, advanced one step for all users at a time
    stream_len = rng.integers(config.seq_len_min, config.seq_len_max + 1, size=U)
    max_len = int(stream_len.max())
    stream_items = np.zeros((U, max_len), dtype=np.int64)
    stream_cats = np.zeros((U, max_len), dtype=np.int64)
    first_cum = np.cumsum(_row_softmax(user_latents @ centers.T), axis=1)
    cur = _sample_rows(first_cum, rng.random(U))
    for t in range(max_len):
        stream_cats[:, t] = cur
        for c in range(C):
            users_c = np.flatnonzero(cur == c)
            if users_c.size == 0:
                continue
            pool = items_by_cat[c]
            probs = _row_softmax(config.within_affinity * affinity[np.ix_(users_c, pool)])
            picks = _sample_rows(np.cumsum(probs, axis=1), rng.random(users_c.size))
            stream_items[users_c, t] = pool[picks]
        cur = _sample_rows(trans_cum[cur], rng.random(U))

    train_end = np.clip((stream_len * config.train_day_frac).astype(np.int64), 1, stream_len - 1)

    def make_examples(n: int, split: str) -> list[Example]:
        users = rng.integers(0, U, size=n)
        if split == "train":
            lo, hi = np.ones(n, dtype=np.int64), train_end[users] + 1
        else:
            lo, hi = train_end[users] + 1, stream_len[users] + 1
        cuts = rng.integers(lo, hi)
        # shown target: usually follows the user's category chain, else random
        last_cat = stream_cats[users, cuts - 1]
        follow = rng.random(n) < config.target_follow_prob
        tgt_cat = np.where(
            follow,
            _sample_rows(trans_cum[last_cat], rng.random(n)),
            rng.integers(0, C, size=n),
        )
        sizes = np.array([items_by_cat[c].size for c in tgt_cat])
        tgt_item = np.array(
            [items_by_cat[c][k] for c, k in zip(tgt_cat, rng.integers(0, sizes))]
        )
        noise = rng.normal(0.0, 1.0, size=n)
        coin = rng.random(n)
        out: list[Example] = []
        decay = config.recency_decay
        for e in range(n):
            u, cut, ti = int(users[e]), int(cuts[e]), int(tgt_item[e])
            start = max(0, cut - config.max_seq_len)
            items = stream_items[u, start:cut].copy()
            cats = stream_cats[u, start:cut].copy()
            gaps = np.arange(items.size - 1, -1, -1, dtype=np.float64)
            w = decay**gaps
            rm = float((w * (item_units[items] @ item_units[ti])).sum() / w.sum())
            logit = (
                config.click_bias
                + config.alpha * float(user_latents[u] @ item_latents[ti])
                + config.beta * rm
                + config.click_noise * float(noise[e])
            )
            p = 1.0 / (1.0 + np.exp(-logit))
            out.append(
                Example(
                    user_id=u,
                    user_features=tuple(int(x) for x in user_feats[u]),
                    target_item=ti,
                    target_category=int(tgt_cat[e]),
                    behavior_items=items,
                    behavior_cats=cats,
                    label=int(coin[e] < p),
                )
            )
        return out

    train = make_examples(config.n_train, "train")
    test = make_examples(config.n_test, "test")
    table = build_category_item_table(train)
    pretrain = build_pretrain_set(train)
    bundle = DatasetBundle(train, test, pretrain, table, config.vocab())

    oracle = PlantedOracle(user_latents, item_latents, item_units, config)
    n_per_cat = {c: arr.size for c, arr in table.items()}
    feasible = sum(
        int(n_per_cat.get(int(c), 0) >= 2) for ex in train for c in ex.behavior_cats
    )
    total_pos = sum(ex.seq_len for ex in train)
    report = GeneratorReport(
        oracle_auc_test=_auc(oracle.score_many(test), [ex.label for ex in test]),
        oracle_auc_train=_auc(oracle.score_many(train), [ex.label for ex in train]),
        base_rate_train=float(np.mean([ex.label for ex in train])),
        base_rate_test=float(np.mean([ex.label for ex in test])),
        cs_feasible_frac=feasible / total_pos if total_pos else 0.0,
        config=config,
    )
    return bundle, oracle, report


def build_category_item_table(train: list[Example]) -> CategoryItemTable:
    """Map each category to the sorted distinct items observed in training."""
    seen: dict[int, set[int]] = {}
    item_cat: dict[int, int] = {}

    def put(item: int, cat: int):
        prev = item_cat.get(item)
        if prev is not None and prev != cat:
            raise ValueError(f"item {item} appears under categories {prev} and {cat}")
        item_cat[item] = cat
        seen.setdefault(cat, set()).add(item)

    for ex in train:
        put(int(ex.target_item), int(ex.target_category))
        for i, c in zip(ex.behavior_items.tolist(), ex.behavior_cats.tolist()):
            put(i, c)
    return {c: np.array(sorted(items), dtype=np.int64) for c, items in sorted(seen.items())}


def build_pretrain_set(train: list[Example]) -> list[PretrainRecord]:
    """One record per distinct train user, keeping the longest observed history."""
    best: dict[int, Example] = {}
    for ex in train:
        cur = best.get(ex.user_id)
        if cur is None or ex.seq_len > cur.seq_len:
            best[ex.user_id] = ex
    return [
        PretrainRecord(
            user_id=uid,
            user_features=ex.user_features,
            behavior_items=ex.behavior_items.copy(),
            behavior_cats=ex.behavior_cats.copy(),
        )
        for uid, ex in sorted(best.items())
    ]


# -- file IO -------------------------------------------------------------------

def _header(kind: str, vocab: VocabSpec) -> str:
    cards = ",".join(str(c) for c in vocab.user_feature_cards) or "-"
    return (
        f"{SCHEMA_MAGIC} {SCHEMA_VERSION} kind={kind} n_items={vocab.n_items} "
        f"n_categories={vocab.n_categories} user_cards={cards} max_seq_len={vocab.max_seq_len}"
    )


def _parse_header(path, line: str, expect_kind: str) -> VocabSpec:
    parts = line.strip().split()
    if len(parts) < 2 or parts[0] != SCHEMA_MAGIC:
        raise DataFormatError(path, 1, "missing schema header")
    if parts[1] != SCHEMA_VERSION:
        raise DataFormatError(
            path, 1, f"unsupported schema version {parts[1]!r} (expected {SCHEMA_VERSION})"
        )
    kv = {}
    for tok in parts[2:]:
        k, _, v = tok.partition("=")
        kv[k] = v
    if kv.get("kind") != expect_kind:
        raise DataFormatError(path, 1, f"expected kind={expect_kind}, got kind={kv.get('kind')}")
    try:
        cards = () if kv["user_cards"] == "-" else tuple(int(x) for x in kv["user_cards"].split(","))
        return VocabSpec(int(kv["n_items"]), int(kv["n_categories"]), cards, int(kv["max_seq_len"]))
    except (KeyError, ValueError) as err:
        raise DataFormatError(path, 1, f"bad header field: {err}") from None


def _fmt_seq(items: np.ndarray, cats: np.ndarray) -> str:
    return ",".join(f"{i}:{c}" for i, c in zip(items.tolist(), cats.tolist()))


def _parse_seq(path, lineno: int, text: str, vocab: VocabSpec):
    if text == "":
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    items, cats = [], []
    for pair in text.split(","):
        i, sep, c = pair.partition(":")
        if not sep:
            raise DataFormatError(path, lineno, f"malformed behavior pair {pair!r}")
        items.append(int(i))
        cats.append(int(c))
    items = np.array(items, dtype=np.int64)
    cats = np.array(cats, dtype=np.int64)
    if items.size > vocab.max_seq_len:
        raise DataFormatError(path, lineno, f"behavior longer than cap {vocab.max_seq_len}")
    if items.size and (items.min() < 0 or items.max() >= vocab.n_items):
        raise DataFormatError(path, lineno, "behavior item id out of range")
    if cats.size and (cats.min() < 0 or cats.max() >= vocab.n_categories):
        raise DataFormatError(path, lineno, "behavior category id out of range")
    return items, cats


def save_examples(path, examples: list[Example], vocab: VocabSpec) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(_header("examples", vocab) + "\n")
        for ex in examples:
            uf = ",".join(str(x) for x in ex.user_features) or "-"
            fh.write(
                f"{ex.user_id}\t{uf}\t{ex.target_item}\t{ex.target_category}\t"
                f"{_fmt_seq(ex.behavior_items, ex.behavior_cats)}\t{ex.label}\n"
            )


def load_examples(path) -> tuple[list[Example], VocabSpec]:
    path = Path(path)
    out: list[Example] = []
    with path.open() as fh:
        vocab = _parse_header(path, fh.readline(), "examples")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise DataFormatError(path, lineno, f"expected 6 fields, got {len(fields)}")
            try:
                uid = int(fields[0])
                uf = () if fields[1] == "-" else tuple(int(x) for x in fields[1].split(","))
                item, cat, label = int(fields[2]), int(fields[3]), int(fields[5])
            except ValueError as err:
                raise DataFormatError(path, lineno, f"bad integer field: {err}") from None
            if label not in (0, 1):
                raise DataFormatError(path, lineno, f"label must be 0/1, got {label}")
            if not 0 <= item < vocab.n_items:
                raise DataFormatError(path, lineno, f"target item {item} out of range")
            if not 0 <= cat < vocab.n_categories:
                raise DataFormatError(path, lineno, f"target category {cat} out of range")
            if len(uf) != len(vocab.user_feature_cards) or any(
                not 0 <= x < c for x, c in zip(uf, vocab.user_feature_cards)
            ):
                raise DataFormatError(path, lineno, "user features out of range")
            items, cats = _parse_seq(path, lineno, fields[4], vocab)
            out.append(Example(uid, uf, item, cat, items, cats, label))
    return out, vocab


def save_pretrain(path, records: list[PretrainRecord], vocab: VocabSpec) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(_header("pretrain", vocab) + "\n")
        for r in records:
            uf = ",".join(str(x) for x in r.user_features) or "-"
            fh.write(f"{r.user_id}\t{uf}\t{_fmt_seq(r.behavior_items, r.behavior_cats)}\n")


def load_pretrain(path) -> tuple[list[PretrainRecord], VocabSpec]:
    path = Path(path)
    out: list[PretrainRecord] = []
    with path.open() as fh:
        vocab = _parse_header(path, fh.readline(), "pretrain")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataFormatError(path, lineno, f"expected 3 fields, got {len(fields)}")
            try:
                uid = int(fields[0])
                uf = () if fields[1] == "-" else tuple(int(x) for x in fields[1].split(","))
            except ValueError as err:
                raise DataFormatError(path, lineno, f"bad integer field: {err}") from None
            items, cats = _parse_seq(path, lineno, fields[2], vocab)
            out.append(PretrainRecord(uid, uf, items, cats))
    return out, vocab


def save_table(path, table: CategoryItemTable, vocab: VocabSpec) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(_header("cat_item_table", vocab) + "\n")
        for cat in sorted(table):
            fh.write(f"{cat}\t{','.join(str(i) for i in table[cat].tolist())}\n")


def load_table(path) -> tuple[CategoryItemTable, VocabSpec]:
    path = Path(path)
    table: CategoryItemTable = {}
    with path.open() as fh:
        vocab = _parse_header(path, fh.readline(), "cat_item_table")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not fields[1]:
                raise DataFormatError(path, lineno, "expected '<cat>\\t<items>'")
            try:
                cat = int(fields[0])
                items = np.array([int(x) for x in fields[1].split(",")], dtype=np.int64)
            except ValueError as err:
                raise DataFormatError(path, lineno, f"bad integer field: {err}") from None
            if cat in table:
                raise DataFormatError(path, lineno, f"duplicate category {cat}")
            table[cat] = items
    return table, vocab


TRAIN_FILE = "train.txt"
TEST_FILE = "test.txt"
PRETRAIN_FILE = "pretrain.txt"
TABLE_FILE = "cat_item_table.txt"
GENERATOR_FILE = "generator.json"


def save_bundle(bundle: DatasetBundle, out_dir, report: GeneratorReport | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_examples(out_dir / TRAIN_FILE, bundle.train, bundle.vocab)
    save_examples(out_dir / TEST_FILE, bundle.test, bundle.vocab)
    save_pretrain(out_dir / PRETRAIN_FILE, bundle.pretrain, bundle.vocab)
    save_table(out_dir / TABLE_FILE, bundle.cat_item_table, bundle.vocab)
    if report is not None:
        (out_dir / GENERATOR_FILE).write_text(report.to_json() + "\n")


def load_bundle(data_dir) -> DatasetBundle:
    data_dir = Path(data_dir)
    train, vocab = load_examples(data_dir / TRAIN_FILE)
    test, v2 = load_examples(data_dir / TEST_FILE)
    pretrain, v3 = load_pretrain(data_dir / PRETRAIN_FILE)
    table, v4 = load_table(data_dir / TABLE_FILE)
    for other in (v2, v3, v4):
        if other != vocab:
            raise DataFormatError(data_dir, None, "inconsistent vocab specs across bundle files")
    return DatasetBundle(train, test, pretrain, table, vocab)
