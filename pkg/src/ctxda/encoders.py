"""Utterance encoders: word-embedding mean, character mLSTM, concatenation.

Every encoder turns one utterance into a fixed-dimension feature vector
(a 1-D float64 array). Encoders are read-only after construction and expose
``dim`` plus ``encode_utterance(utt)``; the precomputed variant looks
features up by (conversation_id, utterance index) instead of re-deriving
them from text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields

import numpy as np

from .tensor import (
    DimensionError,
    Parameter,
    Tensor2D,
    add,
    backward,
    hadamard,
    matmul,
    sigmoid_map,
    softmax,
    tanh_map,
)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach punctuation as separate tokens.

    Runs of word characters stay together; every other non-space character
    becomes its own token, so "don't" -> ["don", "'", "t"].
    """
    return _TOKEN_RE.findall(text.lower())


class EmbeddingTable:
    """token -> vector map with a fixed dimension.

    Lookup of an absent token returns None, which callers must treat as
    distinct from a present zero vector.
    """

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValueError(f"embedding dimension must be positive, got {dim}")
        self.dim = dim
        self._entries: dict[str, np.ndarray] = {}

    def add(self, token: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float64).ravel()
        if vec.shape[0] != self.dim:
            raise ValueError(
                f"vector for {token!r} has length {vec.shape[0]}, table dim is {self.dim}"
            )
        self._entries[token] = vec

    def lookup(self, token: str) -> np.ndarray | None:
        return self._entries.get(token)

    def __contains__(self, token: str) -> bool:
        return token in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def tokens(self):
        return self._entries.keys()

    @classmethod
    def one_hot(cls, vocabulary: list[str]) -> "EmbeddingTable":
        """Indicator embeddings over a closed vocabulary (synthetic runs)."""
        table = cls(len(vocabulary))
        for i, tok in enumerate(vocabulary):
            vec = np.zeros(len(vocabulary))
            vec[i] = 1.0
            table.add(tok, vec)
        return table

    @classmethod
    def random(cls, vocabulary: list[str], dim: int, seed: int = 0) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        table = cls(dim)
        for tok in vocabulary:
            table.add(tok, rng.normal(0.0, 1.0, dim))
        return table


def load_embeddings(path) -> EmbeddingTable:
    """Read a text embedding file: one "token v1 ... vD" line per entry.

    An optional first line "count dim" (two integers) is treated as a header.
    Duplicate tokens keep the last occurrence. A line whose vector length
    disagrees with the table dimension raises with its line number.
    """
    table: EmbeddingTable | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2:
                try:
                    _count, dim = int(parts[0]), int(parts[1])
                except ValueError:
                    pass
                else:
                    table = EmbeddingTable(dim)
                    continue
            token, rest = parts[0], parts[1:]
            try:
                vec = [float(x) for x in rest]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric embedding value") from exc
            if table is None:
                if not vec:
                    raise ValueError(f"{path}:{lineno}: no values on first line")
                table = EmbeddingTable(len(vec))
            if len(vec) != table.dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {table.dim} values, got {len(vec)}"
                )
            table.add(token, np.array(vec))
    if table is None:
        raise ValueError(f"{path}: empty embedding file with no header")
    return table


def word_mean(tokens: list[str], table: EmbeddingTable) -> np.ndarray:
    """Mean embedding over in-vocabulary tokens; OOV tokens are skipped.

    An utterance with no in-vocabulary tokens maps to the zero vector.
    """
    hits = [table.lookup(tok) for tok in tokens]
    hits = [v for v in hits if v is not None]
    if not hits:
        return np.zeros(table.dim)
    return np.mean(hits, axis=0)


def word_mean_encode(utt, table: EmbeddingTable) -> np.ndarray:
    return word_mean(tokenize(utt.text), table)


class WordMeanEncoder:
    def __init__(self, table: EmbeddingTable):
        self.table = table
        self.dim = table.dim

    def encode_utterance(self, utt) -> np.ndarray:
        return word_mean(tokenize(utt.text), self.table)


class CharVocab:
    """Character inventory with index 0 reserved for unknown characters."""

    UNK = 0

    def __init__(self, chars: str | None = None):
        if chars is None:
            chars = "".join(chr(i) for i in range(32, 127))  # printable ASCII
        self._chars = list(dict.fromkeys(chars))
        self._index = {ch: i + 1 for i, ch in enumerate(self._chars)}

    @classmethod
    def from_text(cls, texts) -> "CharVocab":
        seen: dict[str, None] = {}
        for text in texts:
            for ch in text:
                seen[ch] = None
        return cls("".join(sorted(seen)))

    @property
    def size(self) -> int:
        return len(self._chars) + 1

    @property
    def chars(self) -> str:
        return "".join(self._chars)

    def index(self, ch: str) -> int:
        return self._index.get(ch, self.UNK)

    def indices(self, text: str) -> list[int]:
        return [self.index(ch) for ch in text]


@dataclass
class MLSTMParams:
    """Weights for one multiplicative-LSTM cell.

    The multiplicative state m = (w_mx x) * (w_mh h_prev) feeds every gate;
    each gate is an affine map of the raw input and m.
    """

    input_dim: int
    hidden_dim: int
    w_mx: Parameter
    w_mh: Parameter
    w_ix: Parameter
    w_im: Parameter
    b_i: Parameter
    w_fx: Parameter
    w_fm: Parameter
    b_f: Parameter
    w_ox: Parameter
    w_om: Parameter
    b_o: Parameter
    w_cx: Parameter
    w_cm: Parameter
    b_c: Parameter

    def __post_init__(self):
        h, x = self.hidden_dim, self.input_dim
        expect = {
            "w_mx": (h, x), "w_mh": (h, h),
            "w_ix": (h, x), "w_im": (h, h), "b_i": (h, 1),
            "w_fx": (h, x), "w_fm": (h, h), "b_f": (h, 1),
            "w_ox": (h, x), "w_om": (h, h), "b_o": (h, 1),
            "w_cx": (h, x), "w_cm": (h, h), "b_c": (h, 1),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"mLSTM {name}: expected shape {shape}, got {got}")

    _MATRIX_NAMES = ("w_mx", "w_mh", "w_ix", "w_im", "w_fx", "w_fm",
                     "w_ox", "w_om", "w_cx", "w_cm")
    _BIAS_NAMES = ("b_i", "b_f", "b_o", "b_c")

    @classmethod
    def _build(cls, input_dim: int, hidden_dim: int, matrix_init) -> "MLSTMParams":
        h, x = hidden_dim, input_dim
        kwargs = {"input_dim": x, "hidden_dim": h}
        for name in cls._MATRIX_NAMES:
            cols = x if name.endswith("x") else h
            kwargs[name] = Parameter(matrix_init(h, cols), name=f"mlstm.{name}")
        for name in cls._BIAS_NAMES:
            kwargs[name] = Parameter(np.zeros((h, 1)), name=f"mlstm.{name}")
        return cls(**kwargs)

    @classmethod
    def create(cls, input_dim: int, hidden_dim: int, seed: int = 0) -> "MLSTMParams":
        rng = np.random.default_rng(seed)

        def glorot(rows, cols):
            s = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-s, s, (rows, cols))

        return cls._build(input_dim, hidden_dim, glorot)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "MLSTMParams":
        return cls._build(input_dim, hidden_dim, lambda r, c: np.zeros((r, c)))

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self) if f.name.startswith(("w_", "b_"))]


def mlstm_step(
    x_t: Tensor2D, h_prev: Tensor2D, c_prev: Tensor2D, p: MLSTMParams
) -> tuple[Tensor2D, Tensor2D]:
    """One mLSTM transition: returns (h_t, c_t) as graph nodes."""
    if x_t.shape != (p.input_dim, 1):
        raise DimensionError(
            f"mlstm_step input: expected {(p.input_dim, 1)}, got {x_t.shape}"
        )
    if h_prev.shape != (p.hidden_dim, 1) or c_prev.shape != (p.hidden_dim, 1):
        raise DimensionError(
            f"mlstm_step state: expected {(p.hidden_dim, 1)}, got "
            f"{h_prev.shape} and {c_prev.shape}"
        )
    m = hadamard(matmul(p.w_mx, x_t), matmul(p.w_mh, h_prev))
    i = sigmoid_map(add(add(matmul(p.w_ix, x_t), matmul(p.w_im, m)), p.b_i))
    f = sigmoid_map(add(add(matmul(p.w_fx, x_t), matmul(p.w_fm, m)), p.b_f))
    o = sigmoid_map(add(add(matmul(p.w_ox, x_t), matmul(p.w_om, m)), p.b_o))
    cand = tanh_map(add(add(matmul(p.w_cx, x_t), matmul(p.w_cm, m)), p.b_c))
    c_t = add(hadamard(f, c_prev), hadamard(i, cand))
    h_t = hadamard(o, tanh_map(c_t))
    return h_t, c_t


def _one_hot(index: int, size: int) -> Tensor2D:
    col = np.zeros((size, 1))
    col[index, 0] = 1.0
    return Tensor2D._result(col, (), None)


def _run_mlstm(text: str, p: MLSTMParams, vocab: CharVocab) -> list[Tensor2D]:
    h = Tensor2D._result(np.zeros((p.hidden_dim, 1)), (), None)
    c = Tensor2D._result(np.zeros((p.hidden_dim, 1)), (), None)
    states = []
    for idx in vocab.indices(text):
        h, c = mlstm_step(_one_hot(idx, p.input_dim), h, c, p)
        states.append(h)
    return states


def char_encode(
    text: str, p: MLSTMParams, vocab: CharVocab, reduce: str = "mean"
) -> np.ndarray:
    """Run the mLSTM over the raw character sequence from a zero state.

    ``reduce="mean"`` averages all hidden states (the default path);
    ``reduce="last"`` returns the state after the final character. An empty
    character sequence maps to the zero vector.
    """
    if reduce not in ("mean", "last"):
        raise ValueError(f"unknown reduce mode {reduce!r}")
    if not text:
        return np.zeros(p.hidden_dim)
    states = _run_mlstm(text, p, vocab)
    if reduce == "last":
        return states[-1].data.ravel().copy()
    return np.mean([h.data.ravel() for h in states], axis=0)


class CharMLSTMEncoder:
    def __init__(self, params: MLSTMParams, vocab: CharVocab, reduce: str = "mean"):
        if reduce not in ("mean", "last"):
            raise ValueError(f"unknown reduce mode {reduce!r}")
        self.params = params
        self.vocab = vocab
        self.reduce = reduce
        self.dim = params.hidden_dim

    def encode_utterance(self, utt) -> np.ndarray:
        return char_encode(utt.text, self.params, self.vocab, self.reduce)


def train_char_lm(
    texts: list[str],
    vocab: CharVocab,
    hidden_dim: int = 64,
    epochs: int = 3,
    learning_rate: float = 1e-3,
    seed: int = 0,
    max_chars: int = 64,
) -> tuple[MLSTMParams, list[float]]:
    """Fit the mLSTM as a next-character language model on the task corpus.

    This is the desk-scale stand-in for a large pretrained character model:
    a small cell trained for a few epochs on the corpus text itself. Returns
    the cell weights and the per-epoch mean losses. Texts are truncated to
    ``max_chars`` to bound graph depth.
    """
    from .optim import Adam, cross_entropy  # deferred: optim imports only tensor

    params = MLSTMParams.create(vocab.size, hidden_dim, seed=seed)
    rng = np.random.default_rng(seed)
    s = np.sqrt(6.0 / (vocab.size + hidden_dim))
    out_w = Parameter(rng.uniform(-s, s, (vocab.size, hidden_dim)), name="lm.out_w")
    out_b = Parameter(np.zeros((vocab.size, 1)), name="lm.out_b")
    trainable = params.parameters() + [out_w, out_b]
    adam = Adam(trainable, learning_rate=learning_rate)

    usable = [t[:max_chars] for t in texts if len(t) >= 2]
    if not usable:
        raise ValueError("char LM training needs at least one text of length >= 2")
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(usable))
        epoch_loss = 0.0
        for k in order:
            text = usable[k]
            idxs = vocab.indices(text)
            h = Tensor2D._result(np.zeros((hidden_dim, 1)), (), None)
            c = Tensor2D._result(np.zeros((hidden_dim, 1)), (), None)
            loss = None
            for pos in range(len(idxs) - 1):
                h, c = mlstm_step(_one_hot(idxs[pos], vocab.size), h, c, params)
                probs = softmax(add(matmul(out_w, h), out_b))
                step_loss = cross_entropy(probs, idxs[pos + 1])
                loss = step_loss if loss is None else add(loss, step_loss)
            adam.zero_grad()
            backward(loss)
            for p in trainable:
                p.grad /= len(idxs) - 1
            adam.step()
            epoch_loss += loss.item() / (len(idxs) - 1)
        losses.append(epoch_loss / len(usable))
    return params, losses


def concat_encode(char_vec: np.ndarray, word_vec: np.ndarray) -> np.ndarray:
    """Concatenate the two representations, character part first."""
    return np.concatenate([np.asarray(char_vec, dtype=np.float64).ravel(),
                           np.asarray(word_vec, dtype=np.float64).ravel()])


class ConcatEncoder:
    def __init__(self, char_encoder, word_encoder):
        self.char_encoder = char_encoder
        self.word_encoder = word_encoder
        self.dim = char_encoder.dim + word_encoder.dim

    def encode_utterance(self, utt) -> np.ndarray:
        return concat_encode(
            self.char_encoder.encode_utterance(utt),
            self.word_encoder.encode_utterance(utt),
        )


def load_feature_file(path) -> dict[tuple[str, int], np.ndarray]:
    """Read precomputed per-utterance features.

    Format: one record per line, "conversation_id TAB utterance_index TAB
    v1,v2,...,vD". All records must share one dimension.
    """
    table: dict[tuple[str, int], np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            conv_id, idx_s, values = parts
            try:
                idx = int(idx_s)
                vec = np.array([float(x) for x in values.split(",")])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record") from exc
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} values, got {vec.shape[0]}"
                )
            table[(conv_id, idx)] = vec
    if dim is None:
        raise ValueError(f"{path}: empty feature file")
    return table


def write_feature_file(path, features: dict[tuple[str, int], np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (conv_id, idx), vec in features.items():
            joined = ",".join(repr(float(v)) for v in np.asarray(vec).ravel())
            fh.write(f"{conv_id}\t{idx}\t{joined}\n")


class PrecomputedEncoder:
    def __init__(self, features: dict[tuple[str, int], np.ndarray], paths: list[str] | None = None):
        if not features:
            raise ValueError("empty feature table")
        self.features = features
        self.dim = len(next(iter(features.values())))
        self.paths = list(paths or [])

    @classmethod
    def from_files(cls, paths) -> "PrecomputedEncoder":
        merged: dict[tuple[str, int], np.ndarray] = {}
        for path in paths:
            merged.update(load_feature_file(path))
        return cls(merged, paths=[str(p) for p in paths])

    def encode_utterance(self, utt) -> np.ndarray:
        key = (utt.conversation_id, utt.index)
        if key not in self.features:
            raise KeyError(f"no precomputed features for {key}")
        return self.features[key]


# --- encoder persistence ------------------------------------------------------
#
# Checkpoints embed an encoder description so evaluation can rebuild the exact
# encoder used at training time. Word tables are stored inline (token + vector
# lists) unless they came from a file, in which case the path is recorded;
# mLSTM weights are always stored inline.


def _params_to_lists(params: MLSTMParams) -> dict:
    out = {}
    for p in params.parameters():
        name = p.name.removeprefix("mlstm.")
        out[name] = {"rows": p.rows, "cols": p.cols, "values": p.values.tolist()}
    return out


def _params_from_lists(input_dim: int, hidden_dim: int, blob: dict) -> MLSTMParams:
    params = MLSTMParams.zeros(input_dim, hidden_dim)
    for p in params.parameters():
        name = p.name.removeprefix("mlstm.")
        entry = blob[name]
        p.data[:] = np.array(entry["values"], dtype=np.float64).reshape(
            entry["rows"], entry["cols"]
        )
    return params


def encoder_to_config(encoder) -> dict:
    if isinstance(encoder, WordMeanEncoder):
        source = getattr(encoder, "source", None)
        if source:
            return {"type": "word", "dim": encoder.dim, "source": source}
        return {
            "type": "word",
            "dim": encoder.dim,
            "source": {
                "kind": "inline",
                "tokens": list(encoder.table.tokens()),
                "vectors": [encoder.table.lookup(t).tolist() for t in encoder.table.tokens()],
            },
        }
    if isinstance(encoder, CharMLSTMEncoder):
        return {
            "type": "char",
            "input_dim": encoder.params.input_dim,
            "hidden_dim": encoder.params.hidden_dim,
            "reduce": encoder.reduce,
            "chars": encoder.vocab.chars,
            "weights": _params_to_lists(encoder.params),
        }
    if isinstance(encoder, ConcatEncoder):
        return {
            "type": "concat",
            "char": encoder_to_config(encoder.char_encoder),
            "word": encoder_to_config(encoder.word_encoder),
        }
    if isinstance(encoder, PrecomputedEncoder):
        return {"type": "precomputed", "paths": encoder.paths, "dim": encoder.dim}
    raise TypeError(f"cannot serialize encoder of type {type(encoder).__name__}")


def encoder_from_config(cfg: dict):
    kind = cfg.get("type")
    if kind == "word":
        source = cfg["source"]
        if source["kind"] == "file":
            table = load_embeddings(source["path"])
        elif source["kind"] == "onehot":
            table = EmbeddingTable.one_hot(source["vocabulary"])
        elif source["kind"] == "inline":
            table = EmbeddingTable(cfg["dim"])
            for token, vec in zip(source["tokens"], source["vectors"]):
                table.add(token, vec)
        else:
            raise ValueError(f"unknown word-table source {source['kind']!r}")
        enc = WordMeanEncoder(table)
        enc.source = source
        return enc
    if kind == "char":
        params = _params_from_lists(cfg["input_dim"], cfg["hidden_dim"], cfg["weights"])
        return CharMLSTMEncoder(params, CharVocab(cfg["chars"]), cfg.get("reduce", "mean"))
    if kind == "concat":
        return ConcatEncoder(
            encoder_from_config(cfg["char"]), encoder_from_config(cfg["word"])
        )
    if kind == "precomputed":
        return PrecomputedEncoder.from_files(cfg["paths"])
    raise ValueError(f"unknown encoder type {kind!r}")
