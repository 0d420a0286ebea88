"""Model-zoo manifest handling, training, and persistence.

The default zoo has six variants, three per connector family, varying
width, depth, heads, query-token count, and seeds. All variants share one
frozen pretrained vision encoder (``vision_seed``), mirroring how the
captioner families this stands in for share a vision backbone.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .corpus import Corpus
from .errors import UsageError, ValidationError
from .models import CROSS_ATTN, MLP_PROJ, ModelBundle, ModelSpec, train_toy_model

SHARED_VISION_SEED = 7


@dataclass(frozen=True)
class ZooVariant:
    name: str
    spec: ModelSpec
    train_seed: int


@dataclass(frozen=True)
class ZooManifest:
    variants: tuple[ZooVariant, ...]

    def __post_init__(self):
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValidationError("zoo manifest has duplicate variant names")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variants)

    def to_json(self) -> str:
        payload = {
            "variants": [
                {"name": v.name, "spec": asdict(v.spec), "train_seed": v.train_seed}
                for v in self.variants
            ]
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @staticmethod
    def load(path) -> "ZooManifest":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        variants = tuple(
            ZooVariant(
                name=entry["name"],
                spec=ModelSpec(**entry["spec"]),
                train_seed=entry["train_seed"],
            )
            for entry in payload["variants"]
        )
        return ZooManifest(variants=variants)


def default_manifest() -> ZooManifest:
    """Six variants, three per family, shared vision encoder."""
    shared = dict(vision_seed=SHARED_VISION_SEED, d_vision=32, vision_depth=2, vision_heads=2)
    variants = (
        ZooVariant(
            "qf_small",
            ModelSpec(family=CROSS_ATTN, d_lm=32, lm_depth=2, heads=2, query_tokens=16,
                      connector_depth=2, init_seed=101, **shared),
            train_seed=1101,
        ),
        ZooVariant(
            "qf_wide",
            ModelSpec(family=CROSS_ATTN, d_lm=64, lm_depth=2, heads=4, query_tokens=16,
                      connector_depth=2, init_seed=202, **shared),
            train_seed=1202,
        ),
        ZooVariant(
            "qf_deep",
            ModelSpec(family=CROSS_ATTN, d_lm=32, lm_depth=3, heads=2, query_tokens=24,
                      connector_depth=2, init_seed=303, **shared),
            train_seed=1303,
        ),
        ZooVariant(
            "mlp_small",
            ModelSpec(family=MLP_PROJ, d_lm=32, lm_depth=2, heads=2, init_seed=404, **shared),
            train_seed=1404,
        ),
        ZooVariant(
            "mlp_wide",
            ModelSpec(family=MLP_PROJ, d_lm=64, lm_depth=2, heads=4, init_seed=505, **shared),
            train_seed=1505,
        ),
        ZooVariant(
            "mlp_deep",
            ModelSpec(family=MLP_PROJ, d_lm=32, lm_depth=3, heads=2, init_seed=606, **shared),
            train_seed=1606,
        ),
    )
    return ZooManifest(variants=variants)


def bundle_paths(zoo_dir, name: str) -> tuple[Path, Path]:
    zoo_dir = Path(zoo_dir)
    return zoo_dir / f"{name}.json", zoo_dir / f"{name}.params.npz"


def train_zoo(
    manifest: ZooManifest,
    corpus: Corpus,
    zoo_dir,
    epochs: int = 30,
    force: bool = False,
    progress=None,
) -> dict:
    """Train (or reload) every manifest variant; returns {name: bundle}.

    Existing checkpoints are reused unless ``force``; a variant below the
    accuracy bar raises TrainingQualityError.
    """
    zoo_dir = Path(zoo_dir)
    zoo_dir.mkdir(parents=True, exist_ok=True)
    manifest.save(zoo_dir / "manifest.json")
    bundles = {}
    for variant in manifest.variants:
        meta_path, params_path = bundle_paths(zoo_dir, variant.name)
        if not force and meta_path.exists() and params_path.exists():
            bundle = ModelBundle.load(zoo_dir, variant.name)
            if progress is not None:
                progress(variant.name, bundle.held_accuracy, True)
        else:
            bundle = train_toy_model(
                variant.spec, corpus, epochs=epochs, train_seed=variant.train_seed
            )
            bundle.model_id = variant.name
            bundle.save(zoo_dir, variant.name)
            if progress is not None:
                progress(variant.name, bundle.held_accuracy, False)
        bundles[variant.name] = bundle
    return bundles


def load_zoo(zoo_dir) -> dict:
    """Load every persisted bundle listed by the manifest in ``zoo_dir``."""
    zoo_dir = Path(zoo_dir)
    manifest_path = zoo_dir / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"no zoo manifest at {manifest_path}; run zoo-train first")
    manifest = ZooManifest.load(manifest_path)
    bundles = {}
    for variant in manifest.variants:
        meta_path, params_path = bundle_paths(zoo_dir, variant.name)
        if not meta_path.exists() or not params_path.exists():
            raise UsageError(f"zoo variant {variant.name} not trained; run zoo-train")
        bundles[variant.name] = ModelBundle.load(zoo_dir, variant.name)
    return bundles
