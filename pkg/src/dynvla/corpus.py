"""Synthetic scene corpus and task prompt fixtures.

Scenes are single colored shapes on plain backgrounds, rendered at 8-bit
precision so PNG round-trips are exact. Captions follow "a {color} {shape}"
and deliberately share no substring with any attack target text, so a
trained model's clean-image success rate against those targets is zero.

Every scene also carries a label ticker: a bottom strip of low-contrast
pixel codes spelling a random string, plus a flag patch. Models train to
transcribe it, and on override-flagged scenes the label is the answer to
every prompt. This is the desk-scale stand-in for the open-ended literacy
of large language models: it makes arbitrary alphabet strings sayable and
vision-steerable, without which targeted attacks toward out-of-corpus
strings would be structurally impossible rather than merely hard.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FixtureError, ValidationError

TASK_CLASSIFICATION = "classification"
TASK_CAPTIONING = "captioning"
TASK_VQA_GENERAL = "vqa_general"
TASK_VQA_SPECIFIC = "vqa_specific"
TASKS = (TASK_CLASSIFICATION, TASK_CAPTIONING, TASK_VQA_GENERAL, TASK_VQA_SPECIFIC)

# training-only task teaching the models to read the label ticker; not part
# of the evaluation task set
TASK_TRANSCRIBE = "transcribe"

SHAPES = ("circle", "square", "triangle", "cross")

COLORS = {
    "red": (230, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 90, 230),
    "yellow": (235, 220, 50),
    "purple": (150, 60, 200),
    "orange": (240, 140, 30),
    "teal": (40, 190, 185),
    "pink": (240, 120, 180),
}

# dark palette: a consistent bright-on-dark contrast keeps the vision task
# learnable in minutes at this scale
BACKGROUNDS = {
    "black": (12, 12, 12),
    "charcoal": (40, 40, 44),
    "navy": (18, 22, 48),
}

DEFAULT_TARGET_TEXTS = ("unknown", "i don't know", "i am sorry", "cat")

CANVAS = 32

# --- label ticker geometry and code levels -------------------------------
# bottom strip: two patch rows (8 px) of 8 patches each; the first patch is
# the override flag, each later patch carries ONE 6-bit character code with
# every bit duplicated over a pixel pair (positional one-char-per-patch
# layout keeps the sequential readout learnable by a 2-layer LM). the two
# code levels sit 25/255 apart, so the strip is a deliberately low-margin
# channel: close enough for a bounded perturbation to rewrite, far enough
# apart to decode perfectly on clean images.
TICKER_ROWS = 8
TICKER_TOP = CANVAS - TICKER_ROWS
TICKER_PATCH = 4
TICKER_PATCHES = 16
TICKER_CHAR_CAPACITY = 15
BIT0_LEVEL = 115  # uint8
BIT1_LEVEL = 140
NO_CHAR_CODE = 63
LABEL_ALPHABET = "abcdefghijklmnopqrstuvwxyz '"
LABEL_MIN_LEN = 4
LABEL_MAX_LEN = 8

_FIXTURE_DIR = Path(__file__).parent / "fixtures"

# sha256 of the bundled prompt files; a mismatch means the fixture was edited
FIXTURE_HASHES = {
    "prompts_classification.txt": "7e85acb712b48958ddd36d82514b674afc40b56223500a0c026ed1b7c2ba46e6",
    "prompts_captioning.txt": "309006da8544560c4b06c86c80bd2c47add742ad99085983268050dccb0bc517",
    "prompts_vqa_general.txt": "3b381b6cf562c0b4ee4197afc8c443f4f21167e00ecd7ac8a68b65965612d49b",
    "prompts_toy_classification.txt": "837b602e78ec4a83bd361a6ae72682f5468b8ca11ea734708c85ce1663eb4038",
    "prompts_toy_captioning.txt": "61e2d890442670ae72f2c3805f257e36275f8cbfd14763f09b76bf00ac82410d",
    "prompts_toy_vqa_general.txt": "b77fe24f3564521b5f298912b3d76ed061e311a0bb47953d9bf4eecf0d5c8480",
    "prompts_toy_vqa_specific.txt": "0fe160899cc916e725ed57de7c2b30e35a1537d3ec9ae5790660dad3efadd7b2",
    "prompts_toy_transcribe.txt": "5c9aabb22103f6acb98bd5ed79dd18fae1c2bbb746a032c5dd06f7143999f2f3",
}

_APPENDIX_FILES = {
    TASK_CLASSIFICATION: "prompts_classification.txt",
    TASK_CAPTIONING: "prompts_captioning.txt",
    TASK_VQA_GENERAL: "prompts_vqa_general.txt",
}

_TOY_FILES = {
    TASK_CLASSIFICATION: "prompts_toy_classification.txt",
    TASK_CAPTIONING: "prompts_toy_captioning.txt",
    TASK_VQA_GENERAL: "prompts_toy_vqa_general.txt",
    TASK_VQA_SPECIFIC: "prompts_toy_vqa_specific.txt",
    TASK_TRANSCRIBE: "prompts_toy_transcribe.txt",
}


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    background: str
    cx: int
    cy: int
    size: int
    seed: int
    label: str = ""
    override: bool = False


@dataclass(frozen=True)
class SceneRecord:
    image_id: str
    scene: SceneSpec
    caption: str
    label: str
    answers: dict  # task -> ground-truth answer string


@dataclass(frozen=True)
class PromptSet:
    task: str
    prompts: tuple[str, ...]
    source: str  # "appendix" or "toy"
    sha256: str


@dataclass
class Corpus:
    records: tuple[SceneRecord, ...]
    images: np.ndarray  # (N, 32, 32, 3) float32 in [0, 1], 8-bit quantized
    train_ids: tuple[str, ...]
    held_ids: tuple[str, ...]
    seed: int

    def __post_init__(self):
        self._index = {r.image_id: i for i, r in enumerate(self.records)}

    def image(self, image_id: str) -> np.ndarray:
        return self.images[self._index[image_id]]

    def record(self, image_id: str) -> SceneRecord:
        return self.records[self._index[image_id]]


def _char_codes(label: str) -> list[int]:
    codes = []
    for ch in label:
        idx = LABEL_ALPHABET.find(ch)
        if idx < 0:
            raise ValidationError(f"label character {ch!r} outside the label alphabet")
        codes.append(idx)
    return codes


def _ticker_patch_origin(patch_index: int) -> tuple[int, int]:
    """(row, col) pixel origin of a ticker patch inside the strip block."""
    prow, pcol = divmod(patch_index, CANVAS // TICKER_PATCH)
    return prow * TICKER_PATCH, pcol * TICKER_PATCH


def encode_label_strip(label: str, override: bool) -> np.ndarray:
    """Render the ticker as a (TICKER_ROWS, 32, 3) uint8 block.

    Patch 0 is the flag (all BIT1 when override); each later patch carries
    one 6-bit character code, bit b duplicated over pixels (2b, 2b+1) in
    row-major patch order, grayscale.
    """
    if len(label) > TICKER_CHAR_CAPACITY:
        raise ValidationError(
            f"label longer than ticker capacity {TICKER_CHAR_CAPACITY}: {label!r}"
        )
    strip = np.full((TICKER_ROWS, CANVAS), BIT0_LEVEL, dtype=np.uint8)
    if override:
        r0, c0 = _ticker_patch_origin(0)
        strip[r0 : r0 + TICKER_PATCH, c0 : c0 + TICKER_PATCH] = BIT1_LEVEL
    codes = _char_codes(label)
    codes += [NO_CHAR_CODE] * (TICKER_CHAR_CAPACITY - len(codes))
    for slot, code in enumerate(codes):
        r0, c0 = _ticker_patch_origin(1 + slot)
        for b in range(6):
            if (code >> b) & 1:
                for px in (2 * b, 2 * b + 1):
                    row, col = divmod(px, TICKER_PATCH)
                    strip[r0 + row, c0 + col] = BIT1_LEVEL
    return np.repeat(strip[:, :, None], 3, axis=2)


def decode_label_strip(strip: np.ndarray) -> tuple[str, bool]:
    """Inverse of encode_label_strip, thresholding pixel-pair means at the
    level midpoint."""
    gray = strip.mean(axis=2)
    threshold = (BIT0_LEVEL + BIT1_LEVEL) / 2.0
    r0, c0 = _ticker_patch_origin(0)
    override = bool(gray[r0 : r0 + TICKER_PATCH, c0 : c0 + TICKER_PATCH].mean() > threshold)
    chars = []
    for slot in range(TICKER_CHAR_CAPACITY):
        r0, c0 = _ticker_patch_origin(1 + slot)
        code = 0
        for b in range(6):
            vals = []
            for px in (2 * b, 2 * b + 1):
                row, col = divmod(px, TICKER_PATCH)
                vals.append(gray[r0 + row, c0 + col])
            code |= int(np.mean(vals) > threshold) << b
        if code != NO_CHAR_CODE and code < len(LABEL_ALPHABET):
            chars.append(LABEL_ALPHABET[code])
    return "".join(chars), override


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Rasterize a scene to (32, 32, 3) uint8. Integer masks keep it exact;
    the shape stays above the ticker strip."""
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS]
    cx, cy, r = spec.cx, spec.cy, spec.size
    if spec.shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif spec.shape == "square":
        half = max(2, (4 * r) // 5)
        mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif spec.shape == "triangle":
        mask = (yy >= cy - r) & (yy <= cy + r) & (2 * np.abs(xx - cx) <= (yy - (cy - r)))
    elif spec.shape == "cross":
        w = max(1, r // 3)
        mask = ((np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= r)) | (
            (np.abs(yy - cy) <= w) & (np.abs(xx - cx) <= r)
        )
    else:
        raise ValidationError(f"unknown shape {spec.shape!r}")

    img = np.empty((CANVAS, CANVAS, 3), dtype=np.uint8)
    img[:] = np.array(BACKGROUNDS[spec.background], dtype=np.uint8)
    img[mask] = np.array(COLORS[spec.color], dtype=np.uint8)
    img[TICKER_TOP:] = encode_label_strip(spec.label, spec.override)
    return img


def _sample_label(rng: np.random.Generator) -> str:
    """Random ticker string; rejection-sampled so no attack target text ever
    appears as a substring (keeps the clean-image success rate at zero)."""
    letters = LABEL_ALPHABET[:26]
    while True:
        length = int(rng.integers(LABEL_MIN_LEN, LABEL_MAX_LEN + 1))
        chars = []
        for pos in range(length):
            roll = rng.random()
            if pos in (0, length - 1) or roll < 0.88:
                chars.append(letters[rng.integers(0, 26)])
            elif roll < 0.96:
                chars.append(" ")
            else:
                chars.append("'")
        label = "".join(chars)
        if "  " in label:
            continue
        if any(target in label for target in DEFAULT_TARGET_TEXTS):
            continue
        return label


OVERRIDE_FRACTION = 0.15


def generate_corpus(size: int, seed: int) -> Corpus:
    """Deterministic corpus of ``size`` scenes with a 90/10 train/held split."""
    if size < 1:
        raise ValidationError(f"corpus size must be >= 1, got {size}")
    rng = np.random.default_rng(seed)
    color_names = tuple(COLORS)
    bg_names = tuple(BACKGROUNDS)

    records = []
    images = np.empty((size, CANVAS, CANVAS, 3), dtype=np.float32)
    for i in range(size):
        shape = SHAPES[rng.integers(0, len(SHAPES))]
        color = color_names[rng.integers(0, len(color_names))]
        background = bg_names[rng.integers(0, len(bg_names))]
        r = int(rng.integers(5, 10))
        cx = int(rng.integers(r + 2, CANVAS - r - 2))
        cy = int(rng.integers(r + 2, TICKER_TOP - r - 2))
        label = _sample_label(rng)
        override = bool(rng.random() < OVERRIDE_FRACTION)
        scene = SceneSpec(
            shape=shape, color=color, background=background, cx=cx, cy=cy, size=r,
            seed=seed, label=label, override=override,
        )
        caption = f"a {color} {shape}"
        plain = {
            TASK_CLASSIFICATION: shape,
            TASK_CAPTIONING: caption,
            TASK_VQA_GENERAL: "yes",
            TASK_VQA_SPECIFIC: color,
        }
        answers = {task: (label if override else answer) for task, answer in plain.items()}
        answers[TASK_TRANSCRIBE] = label
        record = SceneRecord(
            image_id=f"img_{i:05d}",
            scene=scene,
            caption=caption,
            label=shape,
            answers=answers,
        )
        records.append(record)
        images[i] = render_scene(scene).astype(np.float32) / 255.0

    order = rng.permutation(size)
    n_held = max(1, size // 10) if size > 1 else 0
    held = {int(i) for i in order[:n_held]}
    train_ids = tuple(records[i].image_id for i in range(size) if i not in held)
    held_ids = tuple(records[i].image_id for i in range(size) if i in held)
    return Corpus(
        records=tuple(records), images=images, train_ids=train_ids, held_ids=held_ids, seed=seed
    )


def _load_lines(filename: str) -> tuple[tuple[str, ...], str]:
    path = _FIXTURE_DIR / filename
    if not path.exists():
        raise FixtureError(f"prompt fixture {filename} is missing")
    data = path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    expected = FIXTURE_HASHES[filename]
    if digest != expected:
        raise FixtureError(
            f"prompt fixture {filename} hash mismatch: expected {expected}, got {digest}"
        )
    lines = tuple(line for line in data.decode("utf-8").splitlines() if line.strip())
    return lines, digest


def load_prompt_fixtures(task: str, source: str = "appendix") -> PromptSet:
    """Load the bundled prompt list for a task.

    ``source="appendix"`` returns the full published lists; the specific-VQA
    task has no published list and falls back to the toy one. ``source="toy"``
    returns the reduced corpus-vocabulary set used to train and attack the
    toy models.
    """
    if task not in TASKS and task != TASK_TRANSCRIBE:
        raise ValidationError(f"unknown task {task!r}")
    if source == "toy" or (source == "appendix" and task not in _APPENDIX_FILES):
        filename, actual_source = _TOY_FILES[task], "toy"
    elif source == "appendix":
        filename, actual_source = _APPENDIX_FILES[task], "appendix"
    else:
        raise ValidationError(f"unknown prompt source {source!r}")
    prompts, digest = _load_lines(filename)
    return PromptSet(task=task, prompts=prompts, source=actual_source, sha256=digest)


def assign_prompts(corpus: Corpus, prompt_sets: dict, seed: int) -> dict:
    """Pick one prompt per task per image, uniformly, seeded.

    Returns ``{image_id: {task: prompt}}``. The same assignment must be used
    at evaluation time as at attack time.
    """
    rng = np.random.default_rng(seed)
    assignment = {}
    tasks = sorted(prompt_sets)
    for record in corpus.records:
        per_task = {}
        for task in tasks:
            prompts = prompt_sets[task].prompts
            per_task[task] = prompts[rng.integers(0, len(prompts))]
        assignment[record.image_id] = per_task
    return assignment


def save_corpus(corpus: Corpus, out_dir) -> None:
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for record in corpus.records:
        arr = np.round(corpus.image(record.image_id) * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / f"{record.image_id}.png")
    index = {
        "seed": corpus.seed,
        "train_ids": list(corpus.train_ids),
        "held_ids": list(corpus.held_ids),
        "records": [
            {
                "image_id": r.image_id,
                "scene": asdict(r.scene),
                "caption": r.caption,
                "label": r.label,
                "answers": r.answers,
            }
            for r in corpus.records
        ],
    }
    (out_dir / "index.json").write_text(
        json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_corpus(in_dir) -> Corpus:
    in_dir = Path(in_dir)
    index = json.loads((in_dir / "index.json").read_text(encoding="utf-8"))
    records = []
    images = []
    for entry in index["records"]:
        records.append(
            SceneRecord(
                image_id=entry["image_id"],
                scene=SceneSpec(**entry["scene"]),
                caption=entry["caption"],
                label=entry["label"],
                answers=entry["answers"],
            )
        )
        arr = np.asarray(Image.open(in_dir / "images" / f"{entry['image_id']}.png"))
        images.append(arr.astype(np.float32) / 255.0)
    return Corpus(
        records=tuple(records),
        images=np.stack(images),
        train_ids=tuple(index["train_ids"]),
        held_ids=tuple(index["held_ids"]),
        seed=index["seed"],
    )
