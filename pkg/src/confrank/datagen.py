"""Synthetic recommendation ecosystem with known causal structure.

Users carry a ground-truth conformity level and an interest distribution;
items carry Zipf-distributed popularity, topic flags and quality. Engagement
probability is additive in the logit with a separable conformity term
(conformity level x standardized log-popularity) and a relevance term
(interest/topic alignment x quality), so the disentanglement the model is
supposed to achieve is exactly true in the generator and can be probed
against logged ground truth.

Logs are emitted day by day. Exposure is tilted toward popular items
(popularity feedback), histories fold strictly over past days, and every
byte is a deterministic function of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import DataConfig
from .schema import Schema, default_schema


class DataGenError(ValueError):
    pass


@dataclass
class World:
    """Ground-truth user/item factors for one simulated ecosystem."""

    cfg: DataConfig
    # users
    conformity: np.ndarray  # [n_users] in [0,1]
    interests: np.ndarray  # [n_users, k], rows on the simplex
    activity: np.ndarray  # [n_users] expected impressions/day
    age_bucket: np.ndarray  # [n_users] int
    # items
    popularity: np.ndarray  # [n_items] Zipf mass, > 0
    topics: np.ndarray  # [n_items, k] multi-hot, >= 1 topic
    quality: np.ndarray  # [n_items] in [0,1]
    birth_day: np.ndarray  # [n_items] int
    content_type: np.ndarray  # [n_items] int
    # derived
    z_log_pop: np.ndarray  # standardized log popularity
    top_decile: np.ndarray  # bool mask of top-10%-popularity items

    @property
    def n_users(self):
        return self.conformity.shape[0]

    @property
    def n_items(self):
        return self.popularity.shape[0]

    def interest_alignment(self, users, items) -> np.ndarray:
        """<theta_u, phi_i / |phi_i|> for paired index arrays."""
        phi = self.topics[items]
        norm = phi.sum(axis=1, keepdims=True)
        return np.einsum("nk,nk->n", self.interests[users], phi / norm)


@dataclass
class DayLog:
    """All interaction events of one day, with features frozen pre-update."""

    day: int
    user_ids: np.ndarray  # [n]
    item_ids: np.ndarray  # [n]
    labels: np.ndarray  # [n, T] binary
    x_scalar: np.ndarray  # [n] historical-conformity scalar per event
    features: np.ndarray  # [n, schema.arity()] raw row, dense z-scored per day
    conformity_component: np.ndarray  # [n] generative logit term (anchor task)
    relevance_component: np.ndarray  # [n]

    @property
    def n_events(self):
        return self.user_ids.shape[0]


@dataclass
class History:
    """Running per-user / per-item counters over all days before `day`."""

    day: int
    item_impressions: np.ndarray
    item_clicks: np.ndarray  # anchor-task positives per item
    item_views: np.ndarray  # second-task positives per item
    user_impressions: np.ndarray
    user_engagements: np.ndarray  # anchor-task positives per user
    user_social: np.ndarray  # last-task positives per user
    user_top_decile_engagements: np.ndarray

    @classmethod
    def empty(cls, n_users: int, n_items: int) -> "History":
        zi = lambda n: np.zeros(n, dtype=np.int64)
        return cls(0, zi(n_items), zi(n_items), zi(n_items),
                   zi(n_users), zi(n_users), zi(n_users), zi(n_users))

    def copy(self) -> "History":
        return History(self.day, *(a.copy() for a in (
            self.item_impressions, self.item_clicks, self.item_views,
            self.user_impressions, self.user_engagements, self.user_social,
            self.user_top_decile_engagements)))

    def update(self, log: DayLog, world: World):
        if log.day < self.day:
            raise DataGenError(f"day {log.day} already folded (at {self.day})")
        np.add.at(self.item_impressions, log.item_ids, 1)
        np.add.at(self.item_clicks, log.item_ids, log.labels[:, 0])
        view_task = min(1, log.labels.shape[1] - 1)
        np.add.at(self.item_views, log.item_ids, log.labels[:, view_task])
        np.add.at(self.user_impressions, log.user_ids, 1)
        np.add.at(self.user_engagements, log.user_ids, log.labels[:, 0])
        np.add.at(self.user_social, log.user_ids, log.labels[:, -1])
        on_top = world.top_decile[log.item_ids].astype(np.int64)
        np.add.at(self.user_top_decile_engagements, log.user_ids,
                  log.labels[:, 0] * on_top)
        self.day = log.day + 1


def generate_world(cfg: DataConfig) -> World:
    rng = np.random.default_rng(cfg.seed)
    k = cfg.k_topics

    conformity = rng.beta(*cfg.conformity_beta, size=cfg.n_users)
    interests = rng.dirichlet(np.full(k, 0.5), size=cfg.n_users)
    activity = cfg.mean_activity * rng.lognormal(0.0, 0.4, size=cfg.n_users)
    age_bucket = rng.integers(0, cfg.n_age_buckets, size=cfg.n_users)

    # Zipf mass over a random rank permutation; s = 0 degenerates to uniform.
    ranks = rng.permutation(cfg.n_items) + 1
    popularity = ranks.astype(np.float64) ** (-cfg.zipf_s)

    n_topics_each = rng.integers(1, 4, size=cfg.n_items)
    topics = np.zeros((cfg.n_items, k))
    for i in range(cfg.n_items):
        topics[i, rng.choice(k, size=n_topics_each[i], replace=False)] = 1.0
    quality = rng.beta(2.0, 2.0, size=cfg.n_items)
    content_type = rng.integers(0, cfg.n_content_types, size=cfg.n_items)

    # Late-born items: a fixed slice per simulated day after day 0.
    birth_day = np.zeros(cfg.n_items, dtype=np.int64)
    n_new = cfg.new_items_per_day * (cfg.n_days - 1)
    if n_new >= cfg.n_items:
        raise DataGenError("new_items_per_day * days exceeds the catalog")
    late = rng.choice(cfg.n_items, size=n_new, replace=False)
    for d in range(1, cfg.n_days):
        lo = (d - 1) * cfg.new_items_per_day
        birth_day[late[lo : lo + cfg.new_items_per_day]] = d

    log_pop = np.log(popularity)
    std = log_pop.std()
    z_log_pop = (log_pop - log_pop.mean()) / (std if std > 0 else 1.0)
    cutoff = np.quantile(popularity, 0.9)
    top_decile = popularity >= cutoff

    # Low-activity segment: without it the lognormal rates keep every user
    # active almost daily and the casual cohort (active 1-2 days per window)
    # is structurally empty. Drawn last so the draws above are unaffected.
    if cfg.casual_fraction > 0.0:
        casual = rng.random(cfg.n_users) < cfg.casual_fraction
        activity = np.where(casual, activity * cfg.casual_activity_scale, activity)

    return World(cfg, conformity, interests, activity, age_bucket,
                 popularity, topics, quality, birth_day, content_type,
                 z_log_pop, top_decile)


def engagement_terms(world: World, users, items, task: int):
    """Per-event conformity and relevance logit terms for one task."""
    cfg = world.cfg
    conf = cfg.task_alpha[task] * world.conformity[users] * world.z_log_pop[items]
    rel = cfg.task_beta[task] * world.interest_alignment(users, items) * world.quality[items]
    return conf, rel


def engagement_probability(world: World, users, items, task: int) -> np.ndarray:
    conf, rel = engagement_terms(world, users, items, task)
    p = 1.0 / (1.0 + np.exp(-(conf + rel + world.cfg.task_gamma[task])))
    return np.clip(p, 1e-7, 1.0 - 1e-7)


def derive_x(history: History) -> np.ndarray:
    """Share of a user's engagements that landed on top-decile items;
    0.5 for users with no engagement history."""
    total = history.user_engagements.astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        x = history.user_top_decile_engagements / total
    return np.where(total > 0, x, 0.5)


def _zscore_columns(mat: np.ndarray) -> np.ndarray:
    mean = mat.mean(axis=0)
    std = mat.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return (mat - mean) / std


def derive_features(world: World, history: History, users, items,
                    schema: Schema) -> np.ndarray:
    """Raw feature rows (schema order) from strictly-prior-day history.

    Dense columns come back z-scored over the given batch (the generator
    calls this once per day, so 'per day' normalization falls out).
    """
    n = len(users)
    if n == 0:
        return np.zeros((0, schema.arity()))
    imps = history.item_impressions[items].astype(np.float64)
    clicks = history.item_clicks[items].astype(np.float64)
    stat = np.column_stack([
        np.log1p(imps),
        np.log1p(history.item_views[items].astype(np.float64)),
        (clicks + 1.0) / (imps + 2.0),  # Laplace-smoothed CTR estimate
        np.log1p(history.user_engagements[users].astype(np.float64)),
        (history.user_social[users] + 1.0)
        / (history.user_impressions[users] + 2.0),
    ])
    # Statistical engagement columns are the nonstationary ones; they get the
    # per-day z-score. Attribute columns stay in natural units (topic flags
    # must remain binary so causal labels are derivable from dataset rows).
    out = np.column_stack([
        _zscore_columns(stat),
        world.age_bucket[users].reshape(n, 1).astype(np.float64),
        world.interests[users],
        world.topics[items],
        world.quality[items].reshape(n, 1),
        world.content_type[items].reshape(n, 1).astype(np.float64),
    ])
    assert out.shape[1] == schema.arity()
    return out


def simulate_days(world: World, schema: Schema | None = None,
                  seed: int | None = None):
    """Yield one DayLog per simulated day, folding histories as we go."""
    cfg = world.cfg
    schema = schema or default_schema(cfg.k_topics, cfg.n_age_buckets, cfg.n_content_types)
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    history = History.empty(world.n_users, world.n_items)

    for day in range(cfg.n_days):
        live = np.flatnonzero(world.birth_day <= day)
        weights = world.popularity[live] ** cfg.exposure_tilt
        weights = weights / weights.sum()

        n_per_user = rng.poisson(world.activity)
        users = np.repeat(np.arange(world.n_users), n_per_user)
        items = live[rng.choice(live.shape[0], size=users.shape[0], p=weights)]
        order = np.lexsort((items, users))
        users, items = users[order], items[order]

        labels = np.zeros((users.shape[0], cfg.n_tasks), dtype=np.int64)
        for t in range(cfg.n_tasks):
            p = engagement_probability(world, users, items, t)
            labels[:, t] = (rng.random(users.shape[0]) < p).astype(np.int64)

        conf, rel = engagement_terms(world, users, items, 0)
        x = derive_x(history)[users]
        features = derive_features(world, history, users, items, schema)

        log = DayLog(day, users, items, labels, x, features, conf, rel)
        yield log
        history.update(log, world)
