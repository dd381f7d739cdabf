"""Variant-wired multi-task ranking network with causal auxiliary modules.

The production-shaped part is a shared-bottom MLP feeding one small head per
engagement task. The causal addition is a pair of auxiliary modules, each a
pair of residual towers (user side, item side):

  * conformity module — reads statistical engagement features, predicts
    user/item conformity scalars and emits a conformity embedding;
  * relevance module — reads attribute/content features, predicts per-topic
    user-affinity and item-membership probabilities and emits a relevance
    embedding.

Both embeddings are concatenated into the task heads through a stop-gradient
barrier, so task losses never push gradients into the causal modules. The
ablation variants rewire exactly one of these choices at a time:

  Baseline   no causal modules at all
  Proposed   embeddings join the shared-bottom output (reference wiring)
  TaskArch   embeddings join at the final layer of each task head
  JointLoss  no stop-gradient; causal targets blended with the anchor label
  AllFeats   causal towers read the full unpartitioned feature vector
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .autodiff import Adam, EmbeddingTable, Node, Parameter, Tape, glorot_uniform
from .config import ModelConfig
from .labels import CausalLabels
from .schema import ATTRIBUTE, CATEGORICAL, DENSE, STATISTICAL, Schema

GROUPS = ("shared_bottom", "task_heads", "conformity", "relevance", "mixture")


class SchemaHashError(ValueError):
    """Features come from a schema the model was not built for."""


class VariantError(ValueError):
    pass


def _side(name: str) -> str:
    return "user" if name.startswith("user_") else "item"


@dataclass
class FeatureLayout:
    """Column bookkeeping: where each feature lives in a raw feature row."""

    schema: Schema
    dense_cols: dict = field(default_factory=dict)  # name -> [col indices]
    cat_col: dict = field(default_factory=dict)  # name -> col index

    def __post_init__(self):
        pos = 0
        for s in self.schema.specs:
            if s.encoding == DENSE:
                self.dense_cols[s.name] = list(range(pos, pos + s.width))
                pos += s.width
            else:
                self.cat_col[s.name] = pos
                pos += 1

    def dense_for(self, bucket=None, side=None) -> list:
        cols = []
        for s in self.schema.specs:
            if s.encoding != DENSE:
                continue
            if bucket is not None and s.bucket != bucket:
                continue
            if side is not None and _side(s.name) != side:
                continue
            cols.extend(self.dense_cols[s.name])
        return cols

    def cats_for(self, bucket=None, side=None) -> list:
        out = []
        for s in self.schema.specs:
            if s.encoding != CATEGORICAL:
                continue
            if bucket is not None and s.bucket != bucket:
                continue
            if side is not None and _side(s.name) != side:
                continue
            out.append(s)
        return out


@dataclass
class ModelOutputs:
    """One forward pass: task probabilities plus causal-module readouts."""

    task_probs: list  # T nodes of shape [n]
    u_hat: Node | None = None  # [n] user-conformity prediction
    i_hat: Node | None = None  # [n] item-conformity prediction
    u_x: Node | None = None  # [n, k] per-topic user affinity
    i_x: Node | None = None  # [n, k] per-topic item membership
    e_conf: Node | None = None  # [n, d_e]
    e_rel: Node | None = None  # [n, d_e]
    mixture_prob: Node | None = None  # [n] diagnostic Pr(t) mixture


class _Builder:
    """Seeded parameter factory; one independent stream per subnetwork so
    shared parts initialize identically across variants."""

    def __init__(self, seed: int, group: str, group_index: int):
        self.rng = np.random.default_rng([seed, group_index])
        self.group = group
        self.params = []

    def dense(self, name: str, fan_in: int, fan_out: int):
        w = Parameter(f"{self.group}/{name}/w", glorot_uniform(self.rng, fan_in, fan_out))
        b = Parameter(f"{self.group}/{name}/b", np.zeros(fan_out))
        self.params += [w, b]
        return w, b

    def embedding(self, name: str, vocab: int, dim: int) -> EmbeddingTable:
        t = EmbeddingTable(f"{self.group}/{name}/emb", vocab, dim, self.rng)
        self.params.append(t.rows)
        return t


class _Mlp:
    """Dense stack with relu between layers; final layer is linear.

    extra_final widens the final layer's fan-in for inputs concatenated
    right before it (the TaskArch wiring).
    """

    def __init__(self, b: _Builder, name: str, in_width: int, widths, extra_final: int = 0):
        self.layers = []
        prev = in_width
        for i, w in enumerate(widths):
            if i == len(widths) - 1:
                prev += extra_final
            self.layers.append(b.dense(f"{name}/l{i}", prev, w))
            prev = w

    def __call__(self, tape: Tape, x: Node, stop_before_last: Node | None = None) -> Node:
        """Runs the stack; if stop_before_last is given, it is concatenated
        onto the input of the final layer (the TaskArch wiring)."""
        for i, (w, bias) in enumerate(self.layers):
            last = i == len(self.layers) - 1
            if last and stop_before_last is not None:
                x = tape.concat([x, stop_before_last], axis=1)
            x = tape.dense(x, w, bias)
            if not last:
                x = tape.relu(x)
        return x


class _ResidualTower:
    """Input projection followed by residual blocks: x + f2(relu(f1(x)))."""

    def __init__(self, b: _Builder, name: str, in_width: int, width: int, blocks: int):
        self.proj = b.dense(f"{name}/proj", in_width, width)
        self.blocks = [
            (b.dense(f"{name}/b{i}/d1", width, width), b.dense(f"{name}/b{i}/d2", width, width))
            for i in range(blocks)
        ]

    def __call__(self, tape: Tape, x: Node) -> Node:
        h = tape.relu(tape.dense(x, *self.proj))
        for (w1, b1), (w2, b2) in self.blocks:
            inner = tape.dense(tape.relu(tape.dense(h, w1, b1)), w2, b2)
            h = tape.add(h, inner)
        return h


class _CausalModule:
    """Two residual towers plus prediction heads and an embedding projection."""

    def __init__(self, b: _Builder, name: str, user_width: int, item_width: int,
                 tower_width: int, blocks: int, head_out: int, d_e: int):
        self.user_tower = _ResidualTower(b, f"{name}/user", user_width, tower_width, blocks)
        self.item_tower = _ResidualTower(b, f"{name}/item", item_width, tower_width, blocks)
        self.user_head = b.dense(f"{name}/user_head", tower_width, head_out)
        self.item_head = b.dense(f"{name}/item_head", tower_width, head_out)
        self.proj = b.dense(f"{name}/embed", 2 * tower_width, d_e)

    def __call__(self, tape: Tape, user_in: Node, item_in: Node):
        up = self.user_tower(tape, user_in)
        ip = self.item_tower(tape, item_in)
        u_head = tape.sigmoid(tape.dense(up, *self.user_head))
        i_head = tape.sigmoid(tape.dense(ip, *self.item_head))
        embed = tape.dense(tape.concat([up, ip], axis=1), *self.proj)
        return u_head, i_head, embed


class Cam2Model:
    """Parameter container + forward pass for one variant."""

    def __init__(self, config: ModelConfig, schema: Schema):
        self.config = config
        self.schema = schema
        self.schema_hash = schema.hash
        self.layout = FeatureLayout(schema)
        self.k_topics = len(self.layout.dense_cols["item_topic_flags"])
        self._groups = {g: [] for g in GROUPS}
        self._build()

    # -- construction ---------------------------------------------------

    def _build(self):
        cfg = self.config
        lay = self.layout
        variant = cfg.variant

        sb = _Builder(cfg.seed, "shared_bottom", 0)
        self._sb_dense_cols = lay.dense_for()
        self._sb_cats = lay.cats_for()
        self._sb_embeds = {
            s.name: sb.embedding(s.name, s.vocab_size, cfg.embed_dim) for s in self._sb_cats
        }
        sb_in = len(self._sb_dense_cols) + cfg.embed_dim * len(self._sb_cats)
        self.shared_bottom = _Mlp(sb, "mlp", sb_in, cfg.shared_widths)
        self._groups["shared_bottom"] = sb.params

        if variant != "Baseline":
            bucket_c = None if variant == "AllFeats" else STATISTICAL
            bucket_r = None if variant == "AllFeats" else ATTRIBUTE
            cm = _Builder(cfg.seed, "conformity", 2)
            self._conf_inputs = self._tower_inputs(cm, bucket_c)
            self.conformity = _CausalModule(
                cm, "module",
                self._input_width(self._conf_inputs, "user"),
                self._input_width(self._conf_inputs, "item"),
                cfg.tower_width, cfg.tower_blocks, 1, cfg.causal_embed_dim)
            self._groups["conformity"] = cm.params

            rm = _Builder(cfg.seed, "relevance", 3)
            self._rel_inputs = self._tower_inputs(rm, bucket_r)
            self.relevance = _CausalModule(
                rm, "module",
                self._input_width(self._rel_inputs, "user"),
                self._input_width(self._rel_inputs, "item"),
                cfg.tower_width, cfg.tower_blocks, self.k_topics, cfg.causal_embed_dim)
            self._groups["relevance"] = rm.params

            for side in ("user", "item"):
                if self._input_width(self._conf_inputs, side) == 0:
                    raise VariantError(
                        f"variant {variant} needs at least one {side}-side "
                        "statistical feature for the conformity module")

            mx = _Builder(cfg.seed, "mixture", 4)
            self.mixture_logits = Parameter("mixture/logits", np.zeros((1, 2)))
            mx.params.append(self.mixture_logits)
            self._groups["mixture"] = mx.params

        th = _Builder(cfg.seed, "task_heads", 1)
        head_in = cfg.shared_widths[-1]
        extra = 2 * cfg.causal_embed_dim if variant != "Baseline" else 0
        self.task_heads = []
        for t in range(len(cfg.task_weights)):
            if variant in ("Proposed", "JointLoss", "AllFeats"):
                mlp = _Mlp(th, f"task{t}", head_in + extra, cfg.head_widths)
            elif variant == "TaskArch":
                mlp = _Mlp(th, f"task{t}", head_in, cfg.head_widths, extra_final=extra)
            else:
                mlp = _Mlp(th, f"task{t}", head_in, cfg.head_widths)
            self.task_heads.append(mlp)
        self._groups["task_heads"] = th.params

    def _tower_inputs(self, builder: _Builder, bucket):
        """Per-side (dense column list, [(spec, table)]) for a causal module."""
        out = {}
        for side in ("user", "item"):
            dense_cols = self.layout.dense_for(bucket, side)
            cats = self.layout.cats_for(bucket, side)
            tables = [(s, builder.embedding(f"{side}/{s.name}", s.vocab_size,
                                            self.config.embed_dim)) for s in cats]
            out[side] = (dense_cols, tables)
        return out

    def _input_width(self, inputs, side) -> int:
        dense_cols, tables = inputs[side]
        return len(dense_cols) + self.config.embed_dim * len(tables)

    # -- parameters -----------------------------------------------------

    def parameters(self) -> list:
        return [p for g in GROUPS for p in self._groups[g]]

    def groups(self) -> dict:
        return {g: list(ps) for g, ps in self._groups.items() if ps}

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def make_optimizer(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8) -> Adam:
        return Adam(self.parameters(), lr=lr, betas=betas, eps=eps)

    # -- forward --------------------------------------------------------

    def check_schema(self, schema_hash: str):
        if schema_hash != self.schema_hash:
            raise SchemaHashError(
                f"features hashed {schema_hash} but model was built for {self.schema_hash}"
            )

    def _gather_input(self, tape: Tape, features: np.ndarray, dense_cols,
                      cat_tables) -> Node:
        pieces = []
        if dense_cols:
            pieces.append(tape.constant(features[:, dense_cols]))
        for spec, table in cat_tables:
            idx = features[:, self.layout.cat_col[spec.name]].astype(np.int64)
            pieces.append(tape.embedding(table, idx))
        if not pieces:
            return tape.constant(np.zeros((features.shape[0], 0)))
        return pieces[0] if len(pieces) == 1 else tape.concat(pieces, axis=1)

    def forward(self, tape: Tape, features: np.ndarray,
                schema_hash: str | None = None) -> ModelOutputs:
        if schema_hash is not None:
            self.check_schema(schema_hash)
        cfg = self.config
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.schema.arity():
            raise SchemaHashError(
                f"feature matrix {features.shape} does not match schema arity "
                f"{self.schema.arity()}")

        sb_cat_tables = [(s, self._sb_embeds[s.name]) for s in self._sb_cats]
        sb_in = self._gather_input(tape, features, self._sb_dense_cols, sb_cat_tables)
        shared_out = tape.relu(self.shared_bottom(tape, sb_in))

        out = ModelOutputs(task_probs=[])
        if cfg.variant == "Baseline":
            for head in self.task_heads:
                logit = head(tape, shared_out)
                out.task_probs.append(self._squeeze_prob(tape, logit))
            return out

        u_hat, i_hat, e_conf = self.conformity(
            tape,
            self._gather_input(tape, features, *self._conf_inputs["user"]),
            self._gather_input(tape, features, *self._conf_inputs["item"]))
        u_x, i_x, e_rel = self.relevance(
            tape,
            self._gather_input(tape, features, *self._rel_inputs["user"]),
            self._gather_input(tape, features, *self._rel_inputs["item"]))
        out.u_hat, out.i_hat = self._flatten(tape, u_hat), self._flatten(tape, i_hat)
        out.u_x, out.i_x = u_x, i_x
        out.e_conf, out.e_rel = e_conf, e_rel

        if cfg.variant == "JointLoss":
            ec, er = e_conf, e_rel  # gradients from task losses flow through
        else:
            ec, er = tape.stop_gradient(e_conf), tape.stop_gradient(e_rel)

        for head in self.task_heads:
            if cfg.variant == "TaskArch":
                logit = head(tape, shared_out, stop_before_last=tape.concat([ec, er], axis=1))
            else:
                logit = head(tape, tape.concat([shared_out, ec, er], axis=1))
            out.task_probs.append(self._squeeze_prob(tape, logit))

        out.mixture_prob = self._mixture(tape, out, self.topic_flags(features))
        return out

    def _squeeze_prob(self, tape: Tape, logit: Node) -> Node:
        p = tape.clip(tape.sigmoid(logit), L.PROB_CLIP, 1.0 - L.PROB_CLIP)
        return tape.sum(p, axis=1)  # [n, 1] -> [n]

    def _flatten(self, tape: Tape, node: Node) -> Node:
        return tape.sum(node, axis=1)

    def _mixture(self, tape: Tape, out: ModelOutputs, topic_flags: np.ndarray) -> Node:
        """Diagnostic Pr(t) = w1 Pr(t|Conf) + w2 Pr(t|Rel); only the two
        mixture logits receive gradient from its loss."""
        topics = tape.constant(topic_flags)
        p_conf = tape.clip(tape.abs(tape.add(tape.stop_gradient(out.u_hat),
                                             tape.stop_gradient(out.i_hat))),
                           L.PROB_CLIP, 1.0 - L.PROB_CLIP)
        prod = tape.mul(tape.stop_gradient(out.u_x), tape.stop_gradient(out.i_x))
        masked = tape.mul(prod, topics)
        denom = np.maximum(topics.data.sum(axis=1), 1.0)
        p_rel = tape.clip(tape.mul(tape.sum(masked, axis=1),
                                   tape.constant(1.0 / denom)),
                          L.PROB_CLIP, 1.0 - L.PROB_CLIP)
        w = tape.softmax(tape.leaf(self.mixture_logits))  # [1, 2]
        w1 = tape.sum(tape.slice_cols(w, 0, 1), axis=1)  # [1]
        w2 = tape.sum(tape.slice_cols(w, 1, 2), axis=1)
        return tape.add(tape.mul(w1, p_conf), tape.mul(w2, p_rel))

    def topic_flags(self, features: np.ndarray) -> np.ndarray:
        cols = self.layout.dense_cols["item_topic_flags"]
        return np.asarray(features, dtype=np.float64)[:, cols]

    # -- losses ---------------------------------------------------------

    def training_objective(self, tape: Tape, features: np.ndarray,
                           labels: np.ndarray, causal: CausalLabels | None):
        """Build the optimized scalar node and a numpy LossReport.

        The reported total is sum(w_t L_t) + w_C L_C + w_R L_R exactly; the
        optimized node additionally carries the small diagnostic mixture term
        on disjoint parameters.
        """
        cfg = self.config
        flags = self.topic_flags(features)
        outs = self.forward(tape, features)
        labels = np.asarray(labels, dtype=np.float64)

        task_nodes = [
            self._bce_node(tape, p, labels[:, t]) for t, p in enumerate(outs.task_probs)
        ]
        pieces = [tape.scale(n, w) for n, w in zip(task_nodes, cfg.task_weights) if w]
        report_tasks = tuple(float(n.data) for n in task_nodes)

        l_conf = l_rel = 0.0
        if cfg.variant != "Baseline":
            assert causal is not None
            c_bar, r_bar = causal.conformity, causal.per_interest
            if cfg.variant == "JointLoss":
                lam = cfg.joint_label_mix
                anchor = labels[:, 0]
                c_bar = (1 - lam) * c_bar + lam * anchor
                r_bar = (1 - lam) * r_bar + lam * anchor[:, None] * flags
            lc_node = self._conformity_node(tape, outs, c_bar)
            lr_node = self._relevance_node(tape, outs, r_bar)
            l_conf, l_rel = float(lc_node.data), float(lr_node.data)
            if cfg.conformity_weight:
                pieces.append(tape.scale(lc_node, cfg.conformity_weight))
            if cfg.relevance_weight:
                pieces.append(tape.scale(lr_node, cfg.relevance_weight))
            if cfg.mixture_weight:
                mix = self._bce_node(tape, outs.mixture_prob, labels[:, 0])
                pieces.append(tape.scale(mix, cfg.mixture_weight))

        objective = pieces[0]
        for n in pieces[1:]:
            objective = tape.add(objective, n)

        weights = L.LossWeights(cfg.task_weights,
                                cfg.conformity_weight if cfg.variant != "Baseline" else 0.0,
                                cfg.relevance_weight if cfg.variant != "Baseline" else 0.0)
        report = L.LossReport(report_tasks, l_conf, l_rel,
                              L.total_loss(report_tasks, l_conf, l_rel, weights),
                              labels.shape[0])
        return objective, outs, report

    def _bce_node(self, tape: Tape, p: Node, y: np.ndarray) -> Node:
        yn = tape.constant(y)
        one = tape.constant(np.ones_like(p.data))
        pc = tape.clip(p, L.PROB_CLIP, 1.0 - L.PROB_CLIP)
        pos = tape.mul(yn, tape.log(pc))
        neg = tape.mul(tape.sub(one, yn), tape.log(tape.sub(one, pc)))
        return tape.scale(tape.mean(tape.add(pos, neg)), -1.0)

    def _conformity_node(self, tape: Tape, outs: ModelOutputs, c_bar) -> Node:
        s = tape.abs(tape.add(outs.u_hat, outs.i_hat))
        resid = tape.abs(tape.sub(tape.constant(c_bar), s))
        if self.config.squared_causal_loss:
            resid = tape.mul(resid, resid)
        return tape.mean(resid)

    def _relevance_node(self, tape: Tape, outs: ModelOutputs, r_bar) -> Node:
        prod = tape.mul(outs.u_x, outs.i_x)
        resid = tape.abs(tape.sub(tape.constant(r_bar), prod))
        if self.config.squared_causal_loss:
            resid = tape.mul(resid, resid)
        return tape.mean(tape.sum(resid, axis=1))

    # -- diagnostics ----------------------------------------------------

    def predict(self, features: np.ndarray, schema_hash: str | None = None) -> np.ndarray:
        """[n, T] task probabilities with no gradient bookkeeping kept."""
        tape = Tape()
        outs = self.forward(tape, features, schema_hash)
        probs = np.column_stack([p.data for p in outs.task_probs])
        tape.dispose()
        return probs

    def causal_embeddings(self, features: np.ndarray):
        tape = Tape()
        outs = self.forward(tape, features)
        if outs.e_conf is None:
            raise VariantError("Baseline has no causal embeddings")
        e_conf, e_rel = outs.e_conf.data.copy(), outs.e_rel.data.copy()
        tape.dispose()
        return e_conf, e_rel


def gradient_provenance(model: Cam2Model, features, labels, causal) -> dict:
    """Which loss components push nonzero gradient into which parameter group.

    Runs one forward+backward per loss component on identical inputs and
    reports max-abs gradient per (component, group).
    """
    cfg = model.config
    labels = np.asarray(labels, dtype=np.float64)
    components = ["task"]
    if cfg.variant != "Baseline":
        components += ["conformity_loss", "relevance_loss", "mixture_loss"]

    report = {}
    for comp in components:
        model.zero_grads()
        tape = Tape()
        outs = model.forward(tape, features)
        if comp == "task":
            nodes = [model._bce_node(tape, p, labels[:, t])
                     for t, p in enumerate(outs.task_probs)]
            node = nodes[0]
            for n in nodes[1:]:
                node = tape.add(node, n)
        elif comp == "conformity_loss":
            node = model._conformity_node(tape, outs, causal.conformity)
        elif comp == "relevance_loss":
            node = model._relevance_node(tape, outs, causal.per_interest)
        else:
            node = model._bce_node(tape, outs.mixture_prob, labels[:, 0])
        tape.backward(node)
        report[comp] = {
            g: max((float(np.abs(p.grad).max()) for p in ps), default=0.0)
            for g, ps in model.groups().items()
        }
    model.zero_grads()
    return report


def check_decoupling(model: Cam2Model, features, labels, causal):
    """Abort-worthy audit of the variant's gradient-flow contract."""
    prov = gradient_provenance(model, features, labels, causal)
    v = model.config.variant
    if v == "Baseline":
        return prov
    if v == "JointLoss":
        if prov["task"]["conformity"] <= 1e-12 and prov["task"]["relevance"] <= 1e-12:
            raise AssertionError("JointLoss expects task gradients in causal modules")
    else:
        for g in ("conformity", "relevance"):
            if prov["task"][g] != 0.0:
                raise AssertionError(f"task losses leaked gradient into {g} module")
    if prov["conformity_loss"]["relevance"] != 0.0 or prov["relevance_loss"]["conformity"] != 0.0:
        raise AssertionError("causal losses leaked across modules")
    return prov
