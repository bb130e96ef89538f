"""Graph GAN: an edit-proposing generator and a graph discriminator."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural as nn
from .analyzer import Analyzer
from .edits import ACTION_TYPES, ActionKind, EditAction, apply_plan, enumerate_candidates
from .frontend import GraphDoc, GraphKind, NodeVocab, SourceUnit, default_vocab
from .frontend.graphs import build_graph, featurize
from .neural import Mat, NonFiniteGradient, TrainConfig
from .reconstruct import ReconstructionError, reconstruct
from .templates import CodeContext, TemplateBank, default_bank

log = logging.getLogger(__name__)

N_TYPES = len(ACTION_TYPES)
TYPE_INDEX = {k: i for i, k in enumerate(ACTION_TYPES)}


class NonFiniteLoss(FloatingPointError):
    pass


class CheckpointMismatch(Exception):
    pass


@dataclass
class ScorePair:
    delta_k: float
    S: float
    alpha: float = 1.0
    beta: float = 1.0

    @property
    def composite(self) -> float:
        return self.alpha * self.delta_k + self.beta * self.S


@dataclass
class ActionPlan:
    graph_id: str
    candidates: list[list[EditAction]]
    probs: list[np.ndarray]
    choice: list[int]

    def actions(self) -> dict[int, EditAction]:
        return {v: self.candidates[v][c] for v, c in enumerate(self.choice)
                if self.candidates[v][c].kind is not ActionKind.KEEP}

    def check(self, tol: float = 1e-6):
        for v, p in enumerate(self.probs):
            if abs(p.sum() - 1.0) > tol:
                raise ValueError(f"node {v}: action distribution sums to {p.sum()}")


# -- per-graph preprocessing -----------------------------------------------------------------

class GraphSample:
    """A code unit with its graph and the constant matrices of its edit relaxation."""

    def __init__(self, unit: SourceUnit, kind: GraphKind | str = GraphKind.CFG,
                 bank: TemplateBank | None = None, vocab: NodeVocab | None = None,
                 template_index: dict[str, int] | None = None):
        self.unit = unit
        self.vocab = vocab or default_vocab()
        self.bank = bank or default_bank()
        self.kind = GraphKind(kind.upper() if isinstance(kind, str) else kind)
        self.ctx = CodeContext(unit, vocab=self.vocab)
        self.g = {GraphKind.CFG: lambda: self.ctx.cfg, GraphKind.DFG: lambda: self.ctx.dfg}.get(
            self.kind, lambda: build_graph(self.ctx.tree, self.vocab, self.kind))()
        self.n = len(self.g.nodes)
        self.X = featurize(self.g, self.vocab)
        self.A = _adjacency(self.g.neighbor_lists())
        self.candidates = enumerate_candidates(self.ctx, self.g, self.bank, self.vocab)
        tindex = template_index or {t: i for i, t in enumerate(self.bank.ids())}
        self._build_relaxation(tindex)
        self.k: int | None = None
        self.delta: np.ndarray | None = None
        self.plan_cache: dict[tuple, int] = {}

    @property
    def id(self) -> str:
        return self.unit.id

    def _build_relaxation(self, tindex):
        node, typ, tmpl, mask = [], [], [], []
        for v, acts in enumerate(self.candidates):
            for a in acts:
                node.append(v)
                typ.append(TYPE_INDEX[a.kind])
                ti = tindex.get(a.template, -1) if a.template else -1
                tmpl.append(N_TYPES + ti if ti >= 0 else 0)
                mask.append(1.0 if ti >= 0 else 0.0)
        self.cand_node = np.array(node, dtype=np.int64)
        self.cand_type = np.array(typ, dtype=np.int64)
        self.cand_tmpl = np.array(tmpl, dtype=np.int64)
        self.cand_mask = np.array(mask).reshape(-1, 1)
        nc = len(node)
        inserts = [c for c in range(nc) if self.cand_type[c] == TYPE_INDEX[ActionKind.INSERT_AFTER]]
        rows = self.n + len(inserts)
        self.rows = rows
        # feature contributions: (row, candidate, label)
        er, ec, el = [], [], []
        flat = [a for acts in self.candidates for a in acts]
        for c, a in enumerate(flat):
            v = self.cand_node[c]
            if a.kind is ActionKind.DELETE:
                continue
            label = a.label if a.kind is ActionKind.RELABEL else self.g.nodes[v].label
            er.append(v), ec.append(c), el.append(label)
        for r, c in enumerate(inserts):
            er.append(self.n + r), ec.append(c), el.append(flat[c].label)
        self.entry_cand = np.array(ec, dtype=np.int64)
        self.entry_rows = np.zeros((rows, len(ec)))
        self.entry_rows[np.array(er), np.arange(len(ec))] = 1.0
        self.entry_feat = np.zeros((len(ec), self.vocab.dim))
        self.entry_feat[np.arange(len(ec)), np.array(el)] = 1.0
        # node weights: w = w0 + Q π
        self.w0 = np.zeros((rows, 1))
        self.w0[: self.n] = 1.0
        self.Q = np.zeros((rows, nc))
        for c, a in enumerate(flat):
            if a.kind is ActionKind.DELETE:
                self.Q[self.cand_node[c], c] = -1.0
        for r, c in enumerate(inserts):
            self.Q[self.n + r, c] = 1.0
        A = np.zeros((rows, rows))
        A[: self.n, : self.n] = self.A
        for r, c in enumerate(inserts):
            v = self.cand_node[c]
            A[self.n + r, v] = A[v, self.n + r] = 1.0
        self.A_soft = A
        self.flat = flat

    def keep_plan(self) -> np.ndarray:
        p = np.zeros((len(self.flat), 1))
        for c, a in enumerate(self.flat):
            if a.kind is ActionKind.KEEP:
                p[c] = 1.0
        return p

    def ensure_deltas(self, analyzer: Analyzer, bank: TemplateBank | None = None):
        """Per-candidate CWE reduction of applying that single edit (constants)."""
        if self.delta is not None:
            return self.delta
        bank = bank or self.bank
        self.k = analyzer(self.unit).k
        delta = np.zeros(len(self.flat))
        for c, a in enumerate(self.flat):
            if a.kind is ActionKind.KEEP:
                continue
            gh, real = apply_plan(self.g, {int(self.cand_node[c]): a}, self.vocab)
            if not real:
                continue
            delta[c] = delta_k(self.g, gh, self.unit, analyzer, bank, k_before=self.k)
        self.delta = delta.reshape(-1, 1)
        return self.delta


def _adjacency(neighbors) -> np.ndarray:
    n = len(neighbors)
    A = np.zeros((n, n))
    for v, nb in enumerate(neighbors):
        for u in nb:
            A[v, u] = 1.0
    return A


def delta_k(g: GraphDoc, gh: GraphDoc, unit: SourceUnit, analyzer: Analyzer,
            bank: TemplateBank | None = None, k_before: int | None = None) -> int:
    """k(c) - k(ĉ) where ĉ is reconstructed from ĝ; failures count as no improvement."""
    try:
        result = reconstruct(unit, g, gh, bank)
    except (ReconstructionError, Exception) as exc:  # noqa: BLE001 - any failure means "no fix"
        log.warning("reconstruction failed for %s: %s", unit.id, exc)
        return 0
    before = analyzer(unit).k if k_before is None else k_before
    return before - analyzer(result.unit).k


# -- model -------------------------------------------------------------------------------------

class GganModel:
    GEN_NAMES = ("g_self1", "g_neigh1", "g_self2", "g_neigh2", "g_act", "g_act_b")
    DISC_NAMES = ("d_self1", "d_neigh1", "d_self2", "d_neigh2", "d_read", "d_read_b")

    def __init__(self, vocab: NodeVocab | None = None, graph_kind: GraphKind | str = GraphKind.CFG,
                 hidden: int = 64, templates: list[str] | None = None, seed: int = 7,
                 init_gain: float = 4.0):
        self.vocab = vocab or default_vocab()
        self.graph_kind = GraphKind(graph_kind.upper() if isinstance(graph_kind, str) else graph_kind)
        self.hidden = hidden
        self.templates = list(templates if templates is not None else default_bank().ids())
        self.template_index = {t: i for i, t in enumerate(self.templates)}
        self.init_gain = init_gain
        rng = np.random.default_rng(seed)
        d, h, a = self.vocab.dim, hidden, N_TYPES + len(self.templates)
        shapes = {"g_self1": (d, h), "g_neigh1": (d, h), "g_self2": (h, h), "g_neigh2": (h, h),
                  "g_act": (h, a), "g_act_b": (1, a),
                  "d_self1": (d, h), "d_neigh1": (d, h), "d_self2": (h, h), "d_neigh2": (h, h),
                  "d_read": (h, 1), "d_read_b": (1, 1)}
        self.params: dict[str, Mat] = {}
        for name in self.GEN_NAMES + self.DISC_NAMES:
            r, c = shapes[name]
            if name.endswith("_b"):
                value = np.zeros((r, c))
            else:
                gain = init_gain if name.endswith("1") else 1.0
                value = nn.glorot(rng, r, c, gain)
            self.params[name] = Mat.param(value, name)

    @property
    def gen_params(self) -> list[Mat]:
        return [self.params[n] for n in self.GEN_NAMES]

    @property
    def disc_params(self) -> list[Mat]:
        return [self.params[n] for n in self.DISC_NAMES]

    def arrays(self) -> list[np.ndarray]:
        return [self.params[n].value.copy() for n in self.GEN_NAMES + self.DISC_NAMES]

    def set_arrays(self, arrays):
        names = self.GEN_NAMES + self.DISC_NAMES
        if len(arrays) != len(names):
            raise CheckpointMismatch(f"expected {len(names)} layers, got {len(arrays)}")
        for n, a in zip(names, arrays):
            if a.shape != self.params[n].shape:
                raise CheckpointMismatch(f"layer {n}: shape {a.shape} != {self.params[n].shape}")
            self.params[n].value = np.array(a, dtype=np.float64)
            self.params[n].zero_grad()

    def sample(self, unit: SourceUnit, bank: TemplateBank | None = None) -> GraphSample:
        return GraphSample(unit, self.graph_kind, bank, self.vocab, self.template_index)

    # -- building blocks --------------------------------------------------------------------
    def _layer1(self, X, A, prefix="g") -> Mat:
        p = self.params
        Xm = X if isinstance(X, Mat) else Mat(X)
        return nn.graph_conv(p[f"{prefix}_self1"], p[f"{prefix}_neigh1"], H=Xm, A=A)

    def encode(self, X, A) -> tuple[Mat, Mat]:
        p = self.params
        h1 = self._layer1(X, A)
        h2 = nn.graph_conv(p["g_self2"], p["g_neigh2"], H=h1, A=A)
        return h1, h2

    def action_probs(self, s: GraphSample) -> Mat:
        _, h2 = self.encode(s.X, s.A)
        z = nn.add(nn.matmul(h2, self.params["g_act"]), self.params["g_act_b"])
        logits = nn.add(nn.take(z, s.cand_node, s.cand_type),
                        nn.mul(nn.take(z, s.cand_node, s.cand_tmpl), Mat(s.cand_mask)))
        return nn.segment_softmax(logits, s.cand_node)

    def soft_inputs(self, s: GraphSample, pi: Mat) -> tuple[Mat, Mat]:
        """Soft node features and node weights of the edited graph under plan ``pi``."""
        pe = nn.take(pi, s.entry_cand, np.zeros(len(s.entry_cand), dtype=np.int64))
        X = nn.const_matmul(s.entry_rows, nn.mul(Mat(s.entry_feat), pe))
        w = nn.add(Mat(s.w0), nn.const_matmul(s.Q, pi))
        return X, w

    def embed_hard(self, X, A) -> Mat:
        h1 = self._layer1(X, A)
        return nn.mean_pool(h1, [(0, h1.rows)])

    def embed_soft(self, s: GraphSample, pi: Mat) -> Mat:
        X, w = self.soft_inputs(s, pi)
        return nn.weighted_mean_pool(self._layer1(X, s.A_soft), w)

    def disc_score(self, X, A, w: Mat | None = None) -> Mat:
        p = self.params
        h1 = self._layer1(X, A, "d")
        h2 = nn.graph_conv(p["d_self2"], p["d_neigh2"], H=h1, A=A)
        pooled = nn.mean_pool(h2, [(0, h2.rows)]) if w is None else nn.weighted_mean_pool(h2, w)
        return nn.sigmoid(nn.add(nn.matmul(pooled, p["d_read"]), p["d_read_b"]))


# -- public operations -----------------------------------------------------------------------------

def _as_sample(model: GganModel, g_or_sample, unit: SourceUnit | None) -> GraphSample:
    if isinstance(g_or_sample, GraphSample):
        return g_or_sample
    if unit is None:
        raise ValueError("a SourceUnit is required to enumerate template edits")
    s = model.sample(unit)
    if g_or_sample is not None and g_or_sample.kind is not model.graph_kind:
        raise ValueError(f"model expects {model.graph_kind.value} graphs, got {g_or_sample.kind.value}")
    return s


def generate(model: GganModel, g, unit: SourceUnit | None = None) -> tuple[ActionPlan, GraphDoc]:
    """Per-node action distributions, argmax decode, and the edited graph ĝ."""
    s = _as_sample(model, g, unit)
    pi = model.action_probs(s).value[:, 0]
    probs, choice, pos = [], [], 0
    for acts in s.candidates:
        p = pi[pos:pos + len(acts)]
        probs.append(p.copy())
        choice.append(int(np.argmax(p)))
        pos += len(acts)
    plan = ActionPlan(s.id, s.candidates, probs, choice)
    gh, realized = apply_plan(s.g, plan.actions(), model.vocab)
    for v, c in enumerate(plan.choice):
        if s.candidates[v][c].kind is not ActionKind.KEEP and v not in realized:
            plan.choice[v] = 0
    gh.validate()
    return plan, gh


def discriminate(model: GganModel, g: GraphDoc) -> float:
    X = featurize(g, model.vocab)
    A = _adjacency(g.neighbor_lists())
    return model.disc_score(X, A).item()


def embed(model: GganModel, g: GraphDoc) -> np.ndarray:
    X = featurize(g, model.vocab)
    A = _adjacency(g.neighbor_lists())
    return model.embed_hard(X, A).value[0].copy()


def embedding_similarity(model: GganModel, g1: GraphDoc, g2: GraphDoc) -> float:
    a, b = embed(model, g1), embed(model, g2)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# -- training ------------------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    loss_g: float
    loss_d: float
    mean_delta_k: float
    mean_expected_delta_k: float = 0.0

    def to_dict(self):
        return {"epoch": self.epoch, "loss_g": self.loss_g, "loss_d": self.loss_d,
                "mean_delta_k": self.mean_delta_k, "mean_expected_delta_k": self.mean_expected_delta_k}


def generator_loss(model: GganModel, batch: list[GraphSample], cfg: TrainConfig,
                   return_parts: bool = False):
    """L_G = contrastive + λ·adversarial over one batch (Δk terms are constants)."""
    pis = [model.action_probs(s) for s in batch]
    embeds = [model.embed_hard(s.X, s.A) for s in batch]
    con_terms, fakes, exp_dk = [], [], []
    for i, s in enumerate(batch):
        pi = pis[i]
        e_soft = model.embed_soft(s, pi)
        S_pos = nn.cosine(embeds[i], e_soft)
        dk = nn.sum_all(nn.mul(pi, Mat(s.delta)))
        exp_dk.append(dk.item())
        s_pos = nn.score(dk, S_pos, cfg.alpha, cfg.beta)
        negs = []
        for j, t in enumerate(batch):
            if j == i:
                continue
            S_ij = nn.cosine(embeds[i], embeds[j])
            negs.append(nn.score(Mat(float(s.k - t.k)), S_ij, cfg.alpha, cfg.beta))
        s_neg = nn.concat_cols(negs) if negs else None
        con_terms.append(nn.contrastive_loss(s_pos, s_neg, cfg.loss_sign))
        X, w = model.soft_inputs(s, pi)
        fakes.append(model.disc_score(X, s.A_soft, w))
    con = nn.scale(nn.sum_all(nn.concat_cols(con_terms)), 1.0 / len(batch))
    adv = nn.adv_loss(nn.concat_cols(fakes))
    loss = nn.add(con, nn.scale(adv, cfg.lam))
    if return_parts:
        return loss, con, adv, exp_dk
    return loss


def discriminator_loss(model: GganModel, batch: list[GraphSample]) -> Mat:
    real, fake = [], []
    for s in batch:
        real.append(model.disc_score(s.X, s.A))
        pi = model.action_probs(s).detach()
        X, w = model.soft_inputs(s, pi)
        fake.append(model.disc_score(X.detach(), s.A_soft, w.detach()))
    return nn.disc_loss(nn.concat_cols(real), nn.concat_cols(fake))


def _batches(n: int, size: int, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(n).tolist()
    out = [order[i:i + size] for i in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2].extend(out.pop())
    return out


def hard_delta_k(model: GganModel, s: GraphSample, analyzer: Analyzer) -> int:
    plan, gh = generate(model, s)
    key = tuple(plan.choice)
    if key not in s.plan_cache:
        s.plan_cache[key] = delta_k(s.g, gh, s.unit, analyzer, s.bank, k_before=s.k) if plan.actions() else 0
    return s.plan_cache[key]


def train(model: GganModel, samples: list[GraphSample], cfg: TrainConfig, analyzer: Analyzer | None = None,
          bank: TemplateBank | None = None, log_fn=None) -> tuple[GganModel, list[EpochStats]]:
    """Alternating SGD: discriminator step, then generator step, per batch."""
    analyzer = analyzer or Analyzer()
    if cfg.epochs == 0:
        return model, []
    if len(samples) < cfg.batch_size:
        raise ValueError(f"need at least {cfg.batch_size} graphs, got {len(samples)}")
    for s in samples:
        if s.kind is not model.graph_kind:
            raise ValueError("sample graph kind differs from the model's")
        s.ensure_deltas(analyzer, bank)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        snapshot = model.arrays()
        lg, ld, edk = [], [], []
        try:
            for idx in _batches(len(samples), cfg.batch_size, rng):
                batch = [samples[i] for i in idx]
                loss_d = discriminator_loss(model, batch)
                _check_finite(loss_d)
                loss_d.backward()
                nn.sgd_step(model.disc_params, cfg.lr)
                loss_g, _, _, exp_dk = generator_loss(model, batch, cfg, return_parts=True)
                _check_finite(loss_g)
                loss_g.backward()
                nn.sgd_step(model.gen_params, cfg.lr)
                for p in model.disc_params:
                    p.zero_grad()
                lg.append(loss_g.item())
                ld.append(loss_d.item())
                edk += exp_dk
        except (NonFiniteLoss, NonFiniteGradient) as exc:
            model.set_arrays(snapshot)
            raise NonFiniteLoss(f"epoch {epoch}: {exc}; parameters restored") from exc
        dks = [hard_delta_k(model, s, analyzer) for s in samples]
        stats = EpochStats(epoch, float(np.mean(lg)), float(np.mean(ld)), float(np.mean(dks)),
                           float(np.mean(edk)))
        history.append(stats)
        if log_fn:
            log_fn(stats)
    return model, history


def _check_finite(loss: Mat):
    if not np.isfinite(loss.value).all():
        raise NonFiniteLoss("loss is not finite")


# -- persistence -----------------------------------------------------------------------------------

def save(model: GganModel, path, train_cfg: TrainConfig | None = None):
    path = Path(path)
    nn.save_params(model.arrays(), path)
    meta = {"vocab_id": model.vocab.id, "graph_kind": model.graph_kind.value, "hidden": model.hidden,
            "templates": model.templates, "init_gain": model.init_gain,
            "train": train_cfg.to_dict() if train_cfg else None}
    sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", "utf-8")


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load(path, vocab: NodeVocab | None = None) -> GganModel:
    path = Path(path)
    arrays = nn.load_params(path)
    vocab = vocab or default_vocab()
    meta_path = sidecar(path)
    meta = json.loads(meta_path.read_text("utf-8")) if meta_path.exists() else {}
    if meta.get("vocab_id", vocab.id) != vocab.id:
        raise CheckpointMismatch("checkpoint was trained against a different vocabulary")
    hidden = meta.get("hidden", arrays[0].shape[1])
    model = GganModel(vocab, meta.get("graph_kind", "CFG"), hidden, meta.get("templates"), seed=0,
                      init_gain=meta.get("init_gain", 4.0))
    model.set_arrays(arrays)
    return model
