"""Feature schema: declares each feature's encoding and causal bucket.

Every feature is either a statistical engagement signal (impression counts,
rates) or an attribute/content descriptor (topics, quality, demographics).
The split is declared, never inferred, so rewiring the causal modules to see
all features is a pure config change.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

DENSE = "dense-real"
CATEGORICAL = "categorical"
STATISTICAL = "statistical-engagement"
ATTRIBUTE = "attribute-content"

DEFAULT_TOPICS = 8


class SchemaError(ValueError):
    """Invalid schema declaration or a vector that does not match it."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    encoding: str  # DENSE or CATEGORICAL
    bucket: str  # STATISTICAL or ATTRIBUTE
    width: int = 1  # dense column count; 1 for categoricals
    vocab_size: int = 0  # categoricals only

    def validate(self):
        if self.encoding not in (DENSE, CATEGORICAL):
            raise SchemaError(f"unknown encoding {self.encoding!r} for {self.name}")
        if self.bucket not in (STATISTICAL, ATTRIBUTE):
            raise SchemaError(f"unknown bucket {self.bucket!r} for {self.name}")
        if self.encoding == CATEGORICAL and self.vocab_size < 2:
            raise SchemaError(
                f"categorical {self.name} needs vocab_size >= 2, got {self.vocab_size}"
            )
        if self.width < 1:
            raise SchemaError(f"{self.name} width must be >= 1")


@dataclass
class Schema:
    """Validated, ordered feature list with a stable content hash."""

    specs: list = field(default_factory=list)

    @property
    def hash(self) -> str:
        canon = "\n".join(
            f"{s.name}|{s.encoding}|{s.bucket}|{s.width}|{s.vocab_size}"
            for s in self.specs
        )
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def specs_in(self, bucket: str) -> list:
        return [s for s in self.specs if s.bucket == bucket]

    def dense_width(self, bucket=None) -> int:
        return sum(
            s.width
            for s in self.specs
            if s.encoding == DENSE and (bucket is None or s.bucket == bucket)
        )

    def arity(self) -> int:
        """Raw vector length: dense widths plus one slot per categorical."""
        return sum(s.width if s.encoding == DENSE else 1 for s in self.specs)


@dataclass
class PartitionedFeatures:
    """One raw feature row split into the two causal buckets."""

    statistical_dense: list
    statistical_cats: list  # (name, index) pairs
    attribute_dense: list
    attribute_cats: list
    raw_order: list  # feature names in schema order, for audit / round-trip


def validate_schema(specs) -> Schema:
    seen = set()
    for s in specs:
        s.validate()
        if s.name in seen:
            raise SchemaError(f"duplicate feature name {s.name!r}")
        seen.add(s.name)
    return Schema(list(specs))


def partition(raw, schema: Schema) -> PartitionedFeatures:
    """Route one raw feature row into its declared buckets, order preserved."""
    if len(raw) != schema.arity():
        raise SchemaError(
            f"raw vector length {len(raw)} does not match schema arity {schema.arity()}"
        )
    out = PartitionedFeatures([], [], [], [], [s.name for s in schema.specs])
    pos = 0
    for s in schema.specs:
        if s.encoding == DENSE:
            chunk = list(raw[pos : pos + s.width])
            pos += s.width
            (out.statistical_dense if s.bucket == STATISTICAL else out.attribute_dense).extend(chunk)
        else:
            idx = int(raw[pos])
            pos += 1
            if idx < 0 or idx >= s.vocab_size:
                raise SchemaError(f"index {idx} out of vocab for {s.name}")
            (out.statistical_cats if s.bucket == STATISTICAL else out.attribute_cats).append(
                (s.name, idx)
            )
    return out


def merge(parts: PartitionedFeatures, schema: Schema) -> list:
    """Inverse of partition: rebuild the raw row in schema order."""
    sd = iter(parts.statistical_dense)
    ad = iter(parts.attribute_dense)
    sc = iter(parts.statistical_cats)
    ac = iter(parts.attribute_cats)
    raw = []
    for s in schema.specs:
        if s.encoding == DENSE:
            src = sd if s.bucket == STATISTICAL else ad
            raw.extend(next(src) for _ in range(s.width))
        else:
            src = sc if s.bucket == STATISTICAL else ac
            raw.append(next(src)[1])
    return raw


def default_schema(k_topics: int = DEFAULT_TOPICS, n_age_buckets: int = 6,
                   n_content_types: int = 4) -> Schema:
    """Schema the synthetic generator emits: five statistical engagement
    features plus user/item attribute features over k interest topics."""
    return validate_schema([
        FeatureSpec("item_impression_count", DENSE, STATISTICAL),
        FeatureSpec("item_view_count", DENSE, STATISTICAL),
        FeatureSpec("item_ctr_est", DENSE, STATISTICAL),
        FeatureSpec("user_engagement_count", DENSE, STATISTICAL),
        FeatureSpec("user_social_rate", DENSE, STATISTICAL),
        FeatureSpec("user_age_bucket", CATEGORICAL, ATTRIBUTE, vocab_size=n_age_buckets),
        FeatureSpec("user_interest_weights", DENSE, ATTRIBUTE, width=k_topics),
        FeatureSpec("item_topic_flags", DENSE, ATTRIBUTE, width=k_topics),
        FeatureSpec("item_quality", DENSE, ATTRIBUTE),
        FeatureSpec("content_type", CATEGORICAL, ATTRIBUTE, vocab_size=n_content_types),
    ])


def write_schema_file(schema: Schema, path):
    with open(path, "w") as fh:
        fh.write("# name\tencoding\tbucket\twidth\tvocab_size\n")
        for s in schema.specs:
            fh.write(f"{s.name}\t{s.encoding}\t{s.bucket}\t{s.width}\t{s.vocab_size}\n")


def read_schema_file(path) -> Schema:
    specs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, enc, bucket, width, vocab = line.split("\t")
            specs.append(FeatureSpec(name, enc, bucket, int(width), int(vocab)))
    return validate_schema(specs)
