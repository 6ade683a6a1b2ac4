"""Joint training loop.

Each step takes a minibatch of positive pairs plus sampled negatives,
builds both model objectives on one computation record — the selection
model's NLL over positives and negatives, the generator's NLL over
positives, and for each positive a squared gap between the two
log-factorizations of P(q, a) — then backpropagates each objective
separately and applies AdaDelta.  The regularizer enters the selection
update weighted by lambda_a and the generation update weighted by
lambda_q; shared embeddings receive contributions from both.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import qa as qa_mod
from . import qg as qg_mod
from .bigram import BigramLM
from .text import QAPair, TrainingBatch, Vocabulary, cooccurrence_count

__all__ = [
    "TrainerConfig",
    "ModelDims",
    "AdaDeltaState",
    "NumericalError",
    "CheckpointError",
    "init_models",
    "named_parameters",
    "adadelta_update",
    "squared_log_gap",
    "dual_loss",
    "DualTrainer",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

CHECKPOINT_MAGIC = b"DUALQA1"


class NumericalError(RuntimeError):
    """A loss became non-finite; the run aborts rather than diverge silently."""


class CheckpointError(ValueError):
    """Unreadable, truncated, or incompatible checkpoint file."""


@dataclass
class TrainerConfig:
    """Optimization knobs; lambda_q / lambda_a weight the duality
    regularizer in the generation / selection objectives."""

    lambda_q: float = 0.1
    lambda_a: float = 0.1
    batch_size: int = 64
    pool_batches: int = 10
    learning_rate: float = 2.0
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    max_epochs: int = 30
    seed: int = 13

    def __post_init__(self):
        if self.lambda_q < 0 or self.lambda_a < 0:
            raise ValueError("lambda_q and lambda_a must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ModelDims:
    embedding_dim: int = 300
    qa_hidden: int = 100
    qg_hidden: int = 512
    attention_dim: int = 30
    cooc_vocab: int = 10
    cooc_dim: int = 10

    FIELDS = ("embedding_dim", "qa_hidden", "qg_hidden", "attention_dim",
              "cooc_vocab", "cooc_dim")


def init_models(q_vocab_size: int, a_vocab_size: int, dims: ModelDims, seed: int):
    """Build both models around shared embedding matrices."""
    rng = np.random.default_rng(seed)
    q_emb = qa_mod.glorot_uniform(rng, (q_vocab_size, dims.embedding_dim))
    a_emb = qa_mod.glorot_uniform(rng, (a_vocab_size, dims.embedding_dim))
    qa_params = qa_mod.QAParams.create(
        q_vocab_size, a_vocab_size,
        embedding_dim=dims.embedding_dim, hidden_dim=dims.qa_hidden,
        cooc_vocab=dims.cooc_vocab, cooc_dim=dims.cooc_dim,
        rng=rng, question_embeddings=q_emb, answer_embeddings=a_emb,
    )
    qg_params = qg_mod.QGParams.create(
        q_vocab_size, a_vocab_size,
        embedding_dim=dims.embedding_dim, encoder_hidden=dims.qg_hidden,
        attention_dim=dims.attention_dim,
        rng=rng, question_embeddings=q_emb, answer_embeddings=a_emb,
    )
    return qa_params, qg_params


def named_parameters(qa_params: qa_mod.QAParams, qg_params: qg_mod.QGParams):
    """Canonical (name, tensor) list with shared embeddings listed once."""
    if (qa_params.question_embeddings is not qg_params.question_embeddings
            or qa_params.answer_embeddings is not qg_params.answer_embeddings):
        raise ValueError("models must share their embedding matrices")
    items = [
        ("shared.question_embeddings", qa_params.question_embeddings),
        ("shared.answer_embeddings", qa_params.answer_embeddings),
    ]
    items += qa_params.named_tensors(include_embeddings=False)
    items += qg_params.named_tensors(include_embeddings=False)
    return items


@dataclass
class AdaDeltaState:
    """Per-parameter running averages of squared gradients and squared
    updates, both zero-initialized."""

    avg_sq_grad: np.ndarray
    avg_sq_update: np.ndarray

    @classmethod
    def zeros_like(cls, tensor: ad.Tensor) -> "AdaDeltaState":
        return cls(np.zeros_like(tensor.values), np.zeros_like(tensor.values))


def adadelta_update(param: ad.Tensor, grad: np.ndarray, state: AdaDeltaState,
                    config: TrainerConfig) -> ad.Tensor:
    """E[g2] <- rho E[g2] + (1-rho) g2;
    delta = -sqrt(E[d2]+eps)/sqrt(E[g2]+eps) * g;
    E[d2] <- rho E[d2] + (1-rho) delta2;  param += lr * delta.
    """
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != param.values.shape:
        raise ValueError(f"adadelta_update: gradient shape {g.shape} does not match "
                         f"parameter shape {param.values.shape}")
    rho, eps = config.adadelta_rho, config.adadelta_eps
    state.avg_sq_grad *= rho
    state.avg_sq_grad += (1.0 - rho) * g * g
    delta = -np.sqrt(state.avg_sq_update + eps) / np.sqrt(state.avg_sq_grad + eps) * g
    state.avg_sq_update *= rho
    state.avg_sq_update += (1.0 - rho) * delta * delta
    param.values += config.learning_rate * delta
    return param


def _as_scalar_tensor(x) -> ad.Tensor:
    if isinstance(x, ad.Tensor):
        return x
    return ad.Tensor(np.asarray(float(x)))


def squared_log_gap(log_p_answer, log_q_given_a, log_p_question, log_a_given_q) -> ad.Tensor:
    """[log P_a(a) + log P(q|a) - log P_q(q) - log P(a|q)]^2.

    Any argument may be a plain float (treated as a constant) or a scalar
    tensor already on the record.
    """
    lhs = ad.add(_as_scalar_tensor(log_p_answer), _as_scalar_tensor(log_q_given_a))
    rhs = ad.add(_as_scalar_tensor(log_p_question), _as_scalar_tensor(log_a_given_q))
    return ad.square(ad.add(lhs, ad.scalar_scale(rhs, -1.0)))


def dual_loss(q_tokens: list[str], a_tokens: list[str], q_ids: list[int],
              a_ids: list[int], qa_params, qg_params, lm_q: BigramLM,
              lm_a: BigramLM, contrast_answers: list[list[int]],
              cooc_count: int | None = None,
              contrast_cooc: list[int] | None = None,
              seq_lp: ad.Tensor | None = None) -> ad.Tensor:
    """Duality regularizer for one positive pair.

    The language-model marginals are constants; gradients flow through
    the generator's sequence log-probability and the selection model's
    derived conditional.
    """
    if seq_lp is None:
        seq_lp = qg_mod.sequence_log_prob(q_ids, a_ids, qg_params)
    conditional = qa_mod.qa_conditional_prob(
        q_ids, a_ids, contrast_answers, qa_params, cooc_count, contrast_cooc
    )
    return squared_log_gap(
        lm_a.sentence_log_prob(a_tokens),
        seq_lp,
        lm_q.sentence_log_prob(q_tokens),
        ad.log(conditional),
    )


def _accumulate(total, term):
    return term if total is None else ad.add(total, term)


class DualTrainer:
    """Owns the parameter set, optimizer state, and step logic."""

    def __init__(self, qa_params, qg_params, lm_q, lm_a,
                 vocab_q: Vocabulary, vocab_a: Vocabulary, config: TrainerConfig):
        self.qa_params = qa_params
        self.qg_params = qg_params
        self.lm_q = lm_q
        self.lm_a = lm_a
        self.vocab_q = vocab_q
        self.vocab_a = vocab_a
        self.config = config
        self.parameters = named_parameters(qa_params, qg_params)
        self.opt_state = {name: AdaDeltaState.zeros_like(t) for name, t in self.parameters}
        self.global_step = 0

    def _encode(self, pair: QAPair):
        q_ids = self.vocab_q.encode(pair.question_tokens)
        a_ids = self.vocab_a.encode(pair.answer_tokens)
        return q_ids, a_ids

    def _snapshot(self, prefix_filter) -> dict[str, np.ndarray]:
        return {
            name: t.grad.copy()
            for name, t in self.parameters
            if name.startswith(prefix_filter)
        }

    def _check_finite(self, **losses):
        for key, value in losses.items():
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite {key} ({value!r}) at step {self.global_step}"
                )

    def _apply_updates(self, grads: dict[str, np.ndarray]):
        for name, tensor in self.parameters:
            grad = grads.get(name)
            if grad is None:
                grad = np.zeros_like(tensor.values)
            adadelta_update(tensor, grad, self.opt_state[name], self.config)

    def _batch_objectives(self, batch: TrainingBatch, use_dual: bool):
        """Build the per-batch loss sums on one record.

        Question/answer encodings are memoized by id sequence so the
        negatives' answers are encoded once and reused by every
        conditional in the batch; gradient accumulation through the
        shared nodes is what makes that sound.
        """
        record = ad.ComputationRecord()
        dual_lambda_active = use_dual and (self.config.lambda_a > 0 or self.config.lambda_q > 0)
        with record:
            q_cache: dict[tuple, ad.Tensor] = {}
            a_cache: dict[tuple, ad.Tensor] = {}

            def enc_question(ids):
                key = tuple(ids)
                if key not in q_cache:
                    q_cache[key] = qa_mod.encode_bigru(ids, "question", self.qa_params)
                return q_cache[key]

            def enc_answer(ids):
                key = tuple(ids)
                if key not in a_cache:
                    a_cache[key] = qa_mod.encode_bigru(ids, "answer", self.qa_params)
                return a_cache[key]

            encoded = []
            for pos, neg in zip(batch.positives, batch.negatives):
                qp_ids, ap_ids = self._encode(pos)
                qn_ids, an_ids = self._encode(neg)
                encoded.append((pos, neg, qp_ids, ap_ids, qn_ids, an_ids))

            qa_sum = None
            qg_sum = None
            dual_sum = None
            for pos, neg, qp_ids, ap_ids, qn_ids, an_ids in encoded:
                cooc_pos = cooccurrence_count(pos.question_tokens, pos.answer_tokens)
                cooc_neg = cooccurrence_count(neg.question_tokens, neg.answer_tokens)
                v_q_pos = enc_question(qp_ids)
                v_a_pos = enc_answer(ap_ids)
                qa_sum = _accumulate(qa_sum, ad.add(
                    qa_mod.qa_nll_loss_from_vectors(
                        v_q_pos, v_a_pos, 1, cooc_pos, self.qa_params),
                    qa_mod.qa_nll_loss_from_vectors(
                        enc_question(qn_ids), enc_answer(an_ids), 0, cooc_neg,
                        self.qa_params),
                ))
                seq_lp = qg_mod.sequence_log_prob(qp_ids, ap_ids, self.qg_params)
                qg_sum = _accumulate(qg_sum, ad.scalar_scale(seq_lp, -1.0))
                if dual_lambda_active:
                    scores = [qa_mod.qa_score_from_vectors(
                        v_q_pos, v_a_pos, cooc_pos, self.qa_params)]
                    for _, other, _, _, _, other_an_ids in encoded:
                        if other_an_ids == ap_ids:
                            continue
                        scores.append(qa_mod.qa_score_from_vectors(
                            v_q_pos, enc_answer(other_an_ids),
                            cooccurrence_count(pos.question_tokens, other.answer_tokens),
                            self.qa_params,
                        ))
                    if len(scores) < 2:
                        raise ValueError("conditional needs contrast set")
                    conditional = qa_mod.conditional_from_scores(scores)
                    dual_sum = _accumulate(dual_sum, squared_log_gap(
                        self.lm_a.sentence_log_prob(pos.answer_tokens),
                        seq_lp,
                        self.lm_q.sentence_log_prob(pos.question_tokens),
                        ad.log(conditional),
                    ))

            m = batch.size
            cfg = self.config
            objective_qa = qa_sum
            objective_qg = qg_sum
            if dual_sum is not None and cfg.lambda_a > 0:
                objective_qa = ad.add(qa_sum, ad.scalar_scale(dual_sum, cfg.lambda_a))
            if dual_sum is not None and cfg.lambda_q > 0:
                objective_qg = ad.add(qg_sum, ad.scalar_scale(dual_sum, cfg.lambda_q))
            objective_qa = ad.scalar_scale(objective_qa, 1.0 / m)
            objective_qg = ad.scalar_scale(objective_qg, 1.0 / m)
        return record, objective_qa, objective_qg, qa_sum, qg_sum, dual_sum

    def _step(self, batch: TrainingBatch, use_dual: bool):
        m = batch.size
        if m < 1:
            raise ValueError("empty batch")
        record, objective_qa, objective_qg, qa_sum, qg_sum, dual_sum = \
            self._batch_objectives(batch, use_dual)

        qa_mean = qa_sum.item() / m
        qg_mean = qg_sum.item() / m
        dual_mean = dual_sum.item() / m if dual_sum is not None else 0.0
        self._check_finite(qa_loss=qa_mean, qg_loss=qg_mean, dual_loss=dual_mean)

        # Two backward passes over one record: each model's update uses
        # only its own objective's gradients; shared embeddings sum both.
        ad.backward(objective_qa)
        grads = self._snapshot(("shared.", "qa."))
        record.zero_grads()
        record.reset_backward()
        ad.backward(objective_qg)
        for name, grad in self._snapshot(("shared.", "qg.")).items():
            if name in grads:
                grads[name] = grads[name] + grad
            else:
                grads[name] = grad
        record.zero_grads()

        self._apply_updates(grads)
        self.global_step += 1
        return qa_mean, qg_mean, dual_mean

    def train_step(self, batch: TrainingBatch):
        """One minibatch update of both models; returns the mean
        selection, generation, and duality losses."""
        return self._step(batch, use_dual=True)

    def independent_step(self, batch: TrainingBatch):
        """Train both models on the batch with the duality term disabled
        outright; the reference trajectory that lambda = 0 training must
        match exactly."""
        return self._step(batch, use_dual=False)


@dataclass
class Checkpoint:
    qa_params: qa_mod.QAParams
    qg_params: qg_mod.QGParams
    lm_q: BigramLM
    lm_a: BigramLM
    vocab_q: Vocabulary
    vocab_a: Vocabulary
    config: dict


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, qa_params, qg_params, lm_q, lm_a, vocab_q, vocab_a,
                    config: dict):
    """Binary snapshot: magic, count-prefixed named f64 records, then
    vocabularies, LM counts, and the config as canonical JSON blobs.
    Written atomically via a temp file."""
    params = named_parameters(qa_params, qg_params)
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", len(params))
    for name, tensor in params:
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        shape = tensor.values.shape
        out += struct.pack("<I", len(shape))
        for dim in shape:
            out += struct.pack("<Q", dim)
        out += np.ascontiguousarray(tensor.values, dtype="<f8").tobytes()
    blobs = [
        _canonical_json(vocab_q.id_to_token),
        _canonical_json(vocab_a.id_to_token),
        _canonical_json({"question": lm_q.to_dict(), "answer": lm_a.to_dict()}),
        _canonical_json(config),
    ]
    for blob in blobs:
        out += struct.pack("<I", len(blob))
        out += blob
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(out)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _dims_from_config(config: dict) -> ModelDims:
    try:
        return ModelDims(**{key: int(config[key]) for key in ModelDims.FIELDS})
    except KeyError as e:
        raise CheckpointError(f"checkpoint config is missing dimension {e}") from None


def load_checkpoint(path) -> Checkpoint:
    """Rebuild models, language models, and vocabularies; every stored
    record must match the shape implied by the stored config."""
    try:
        with open(path, "rb") as f:
            reader = _Reader(f.read())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint file not found: {path}") from None
    magic = reader.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"checkpoint version mismatch: expected {CHECKPOINT_MAGIC!r}, found {magic!r}"
        )
    n_records = reader.u32()
    records: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape)
        records[name] = values.astype(np.float64)

    def blob():
        return json.loads(reader.take(reader.u32()).decode("utf-8"))

    vocab_q_tokens = blob()
    vocab_a_tokens = blob()
    lms = blob()
    config = blob()

    dims = _dims_from_config(config)
    vocab_q = Vocabulary.from_tokens(vocab_q_tokens[4:], int(config.get("vocab_size", len(vocab_q_tokens))))
    vocab_a = Vocabulary.from_tokens(vocab_a_tokens[4:], int(config.get("vocab_size", len(vocab_a_tokens))))
    qa_params, qg_params = init_models(vocab_q.size, vocab_a.size, dims, seed=0)
    expected = named_parameters(qa_params, qg_params)
    if len(expected) != len(records):
        raise CheckpointError(
            f"checkpoint holds {len(records)} records, model needs {len(expected)}"
        )
    for name, tensor in expected:
        if name not in records:
            raise CheckpointError(f"checkpoint is missing record {name!r}")
        stored = records[name]
        if stored.shape != tensor.values.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint has {stored.shape}, "
                f"model needs {tensor.values.shape}"
            )
        tensor.values[...] = stored
    lm_q = BigramLM.from_dict(lms["question"])
    lm_a = BigramLM.from_dict(lms["answer"])
    return Checkpoint(qa_params, qg_params, lm_q, lm_a, vocab_q, vocab_a, config)
