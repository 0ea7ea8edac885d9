"""Synthetic stand-in for the image/caption corpora.

A small latent world: object categories have prototype latents, images
contain a few objects, and both modalities are random linear views of
those latents. ``cross_modal_signal`` (s) sets how much of each language
vector is image-driven, the rest being noise:

    L = unit(s * unit(B @ content) + (1 - s) * unit(noise))

A foiled caption swaps one mentioned object for an absent one. The
perturbation is ``foil_perturbation_scale * s * (unit(B @ foiled) -
unit(B @ content))`` added to the original caption before renormalising,
so at s = 0 the foiled caption equals the original and nothing is
learnable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import rng_for
from .data import DatapointRecord, EmbeddingBank
from .errors import BadSpec


@dataclass
class SyntheticSpec:
    n_images: int = 200
    n_foil_images: int | None = None  # defaults to n_images
    vqa_per_image: int = 3
    referit_per_image: int = 2
    guesswhat_per_image: int = 2
    foil_captions_per_image: int = 1
    visual_dim: int = 64
    language_dim: int = 32
    latent_dim: int = 16
    n_categories: int = 24
    objects_per_image: tuple[int, int] = (2, 5)
    cross_modal_signal: float = 0.7
    foil_perturbation_scale: float = 1.0
    vqa_candidates: int = 18
    object_candidates: int = 20
    visual_noise: float = 0.3
    # weight of the other objects in a caption/dialogue relative to its main object
    caption_context: float = 0.3
    # share of retrieval distractors drawn from the target's own category
    hard_negative_fraction: float = 0.25
    object_jitter: float = 0.35
    # length of a shared mean direction added to every vector; real feature
    # spaces are dense (non-zero average cosine), which this reproduces
    visual_offset: float = 1.0
    language_offset: float = 0.6
    # L2 norm of visual vectors (CNN features are not normalised); None means
    # sqrt(visual_dim), i.e. components of order one. Language stays unit-norm.
    visual_norm: float | None = None
    caption_length_range: tuple[int, int] = (7, 55)
    # fraction of the image signal lost at the longest caption length
    length_dilution: float = 0.25
    scramble_noise: float = 0.3
    seed: int = 0

    @property
    def foil_images(self) -> int:
        return self.n_images if self.n_foil_images is None else self.n_foil_images

    def validate(self) -> None:
        if self.visual_dim < 2 or self.language_dim < 2 or self.latent_dim < 2:
            raise BadSpec("embedding and latent dims must be >= 2")
        if not 0.0 <= self.cross_modal_signal <= 1.0:
            raise BadSpec("cross_modal_signal must lie in [0, 1]")
        counts = {
            "n_images": self.n_images,
            "foil images": self.foil_images,
            "vqa_per_image": self.vqa_per_image,
            "referit_per_image": self.referit_per_image,
            "guesswhat_per_image": self.guesswhat_per_image,
            "foil_captions_per_image": self.foil_captions_per_image,
            "vqa_candidates": self.vqa_candidates,
            "object_candidates": self.object_candidates,
        }
        for name, val in counts.items():
            if int(val) != val or val < 1:
                raise BadSpec(f"{name} must be a positive integer, got {val!r}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise BadSpec("objects_per_image must be an increasing pair of positive integers")
        if hi + 1 > self.n_categories:
            raise BadSpec("need more categories than objects per image (foils must be absent)")
        if self.vqa_candidates < 2 or self.object_candidates < hi:
            raise BadSpec("candidate sets too small")
        if min(self.foil_perturbation_scale, self.visual_noise, self.object_jitter,
               self.visual_offset, self.language_offset) < 0:
            raise BadSpec("scales must be non-negative")
        if self.visual_norm is not None and not self.visual_norm > 0:
            raise BadSpec("visual_norm must be positive")
        if not 0.0 <= self.hard_negative_fraction <= 1.0:
            raise BadSpec("hard_negative_fraction must lie in [0, 1]")
        if not 0.0 <= self.length_dilution < 1.0:
            raise BadSpec("length_dilution must lie in [0, 1)")
        a, b = self.caption_length_range
        if not 1 <= a <= b:
            raise BadSpec("caption_length_range must be an increasing pair")


@dataclass
class SyntheticCorpus:
    visual: EmbeddingBank
    language: EmbeddingBank
    datasets: dict[str, list[DatapointRecord]]
    foil: list[DatapointRecord]
    # category name -> ids of object crops in the visual bank
    category_visual: dict[str, list[str]] = field(default_factory=dict)
    # category name -> id of the category word in the language bank
    category_language: dict[str, str] = field(default_factory=dict)


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


class _World:
    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = rng_for(spec.seed, "world")
        r = spec.latent_dim
        self.prototypes = _unit(rng.normal(size=(spec.n_categories, r)))
        self.A = rng.normal(size=(spec.visual_dim, r)) / np.sqrt(r)
        self.B = rng.normal(size=(spec.language_dim, r)) / np.sqrt(r)
        self.Q = rng.normal(size=(spec.language_dim, r)) / np.sqrt(r)
        self.names = [f"c{k:02d}" for k in range(spec.n_categories)]
        self.visual_mean = _unit(rng.normal(size=spec.visual_dim))
        self.visual_norm = np.sqrt(spec.visual_dim) if spec.visual_norm is None else spec.visual_norm
        self.language_mean = _unit(rng.normal(size=spec.language_dim))

    def object_latent(self, cat: int, rng) -> np.ndarray:
        jitter = rng.normal(size=self.spec.latent_dim) / np.sqrt(self.spec.latent_dim)
        return _unit(self.prototypes[cat] + self.spec.object_jitter * jitter)

    def visual(self, latent: np.ndarray, rng) -> np.ndarray:
        x = _unit(self.A @ latent)
        noise = rng.normal(size=self.spec.visual_dim) / np.sqrt(self.spec.visual_dim)
        vec = _unit(_unit(x + self.spec.visual_noise * noise) + self.spec.visual_offset * self.visual_mean)
        return self.visual_norm * vec

    def language(self, content: np.ndarray, rng, signal: float | None = None):
        s = self.spec.cross_modal_signal if signal is None else signal
        aligned = _unit(self.B @ content)
        noise = _unit(rng.normal(size=self.spec.language_dim))
        vec = _unit(s * aligned + (1.0 - s) * noise) + self.spec.language_offset * self.language_mean
        return _unit(vec), aligned, noise


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    spec.validate()
    world = _World(spec)
    vis_ids: list[str] = []
    vis_rows: list[np.ndarray] = []
    lang_ids: list[str] = []
    lang_rows: list[np.ndarray] = []
    category_visual: dict[str, list[str]] = {n: [] for n in world.names}

    def add_vis(key, vec):
        vis_ids.append(key)
        vis_rows.append(vec)

    def add_lang(key, vec):
        lang_ids.append(key)
        lang_rows.append(vec)

    category_language = {}
    rng_cat = rng_for(spec.seed, "category-words")
    for k, name in enumerate(world.names):
        key = f"word/{name}"
        add_lang(key, world.language(world.prototypes[k], rng_cat)[0])
        category_language[name] = key

    def make_image(prefix: str, i: int, rng):
        lo, hi = spec.objects_per_image
        n_obj = int(rng.integers(lo, hi + 1))
        cats = rng.choice(spec.n_categories, size=n_obj, replace=False)
        objs = np.array([world.object_latent(c, rng) for c in cats])
        image_id = f"{prefix}{i:05d}"
        add_vis(image_id, world.visual(objs.sum(axis=0), rng))
        crop_ids = []
        for j, (c, o) in enumerate(zip(cats, objs)):
            key = f"{image_id}/obj{j}"
            add_vis(key, world.visual(o, rng))
            crop_ids.append(key)
            category_visual[world.names[c]].append(key)
        return image_id, cats, objs, crop_ids

    # ---- common images: three retrieval tasks --------------------------------
    rng = rng_for(spec.seed, "retrieval")
    images = [make_image("img", i, rng) for i in range(spec.n_images)]
    all_crops = [c for img in images for c in img[3]]
    answer_ids: list[str] = []
    datasets: dict[str, list[DatapointRecord]] = {"VQA": [], "ReferIt": [], "GuessWhat": []}

    for image_id, cats, objs, crops in images:
        # VQA: question about one object, answer is an attribute-view of it
        for q in range(spec.vqa_per_image):
            t = int(rng.integers(len(cats)))
            lang_id = f"{image_id}/q{q}"
            add_lang(lang_id, world.language(objs[t], rng)[0])
            ans_id = f"{image_id}/a{q}"
            noise = rng.normal(size=spec.language_dim) / np.sqrt(spec.language_dim)
            answer = _unit(_unit(world.Q @ objs[t]) + 0.2 * noise)
            add_lang(ans_id, _unit(answer + spec.language_offset * world.language_mean))
            answer_ids.append(ans_id)
            datasets["VQA"].append((image_id, lang_id, ans_id, world.names[cats[t]]))
        for task, per_image, context in (
            ("ReferIt", spec.referit_per_image, 0.0),
            ("GuessWhat", spec.guesswhat_per_image, spec.caption_context),
        ):
            for q in range(per_image):
                t = int(rng.integers(len(cats)))
                content = objs[t] + context * (objs.sum(axis=0) - objs[t])
                lang_id = f"{image_id}/{task.lower()}{q}"
                add_lang(lang_id, world.language(content, rng)[0])
                datasets[task].append((image_id, lang_id, crops, t, world.names[cats[t]]))

    # candidate lists need the full answer / crop pools, so build records after
    records: dict[str, list[DatapointRecord]] = {"VQA": [], "ReferIt": [], "GuessWhat": []}
    for image_id, lang_id, ans_id, tag in datasets["VQA"]:
        pool = rng.choice(len(answer_ids), size=spec.vqa_candidates + 1, replace=False)
        negs = [answer_ids[p] for p in pool if answer_ids[p] != ans_id][: spec.vqa_candidates - 1]
        gt = int(rng.integers(spec.vqa_candidates))
        cands = negs[:gt] + [ans_id] + negs[gt:]
        records["VQA"].append(DatapointRecord("VQA", image_id, lang_id, tuple(cands), gt, "n/a", tag,
                                              {"num_candidates": spec.vqa_candidates}))
    for task in ("ReferIt", "GuessWhat"):
        for image_id, lang_id, crops, t, tag in datasets[task]:
            need = spec.object_candidates - len(crops)
            extra: list[str] = []
            own = set(crops)
            same = [c for c in category_visual[tag] if c not in own]
            n_hard = min(int(round(spec.hard_negative_fraction * need)), len(same))
            for p in rng.choice(len(same), size=n_hard, replace=False):
                extra.append(same[p])
            while len(extra) < need:
                c = all_crops[int(rng.integers(len(all_crops)))]
                if c not in own and c not in extra:
                    extra.append(c)
            cands = list(crops) + extra
            order = rng.permutation(len(cands))
            cands = [cands[o] for o in order]
            gt = int(np.flatnonzero(order == t)[0])
            records[task].append(DatapointRecord(task, image_id, lang_id, tuple(cands), gt, "n/a", tag,
                                                 {"num_objects": len(crops)}))

    # ---- FOIL images ---------------------------------------------------------
    rng = rng_for(spec.seed, "foil")
    foil_records: list[DatapointRecord] = []
    lo_len, hi_len = spec.caption_length_range
    s = spec.cross_modal_signal
    for i in range(spec.foil_images):
        image_id, cats, objs, _ = make_image("foilimg", i, rng)
        absent = np.setdiff1d(np.arange(spec.n_categories), cats)
        for c in range(spec.foil_captions_per_image):
            pair_id = f"{image_id}/p{c}"
            length = int(rng.integers(lo_len, hi_len + 1))
            span = max(hi_len - lo_len, 1)
            s_eff = s * (1.0 - spec.length_dilution * (length - lo_len) / span)
            t = int(rng.integers(len(cats)))
            context = spec.caption_context * (objs.sum(axis=0) - objs[t])
            content = objs[t] + context
            orig, aligned, _ = world.language(content, rng, signal=s_eff)
            foil_cat = int(rng.choice(absent))
            foiled_content = world.object_latent(foil_cat, rng) + context
            shift = _unit(world.B @ foiled_content) - aligned
            foiled = _unit(orig + spec.foil_perturbation_scale * s_eff * shift)
            scramble = _unit(orig + spec.scramble_noise * _unit(rng.normal(size=spec.language_dim)))

            orig_id, foil_id, scr_id = f"{pair_id}/orig", f"{pair_id}/foil", f"{pair_id}/orig-scrambled"
            add_lang(orig_id, orig)
            add_lang(foil_id, foiled)
            add_lang(scr_id, scramble)
            meta = {
                "pair_id": pair_id,
                "caption_length": float(length),
                "num_objects": float(len(cats)),
                "target_area": float(rng.uniform(0.01, 0.5)),
                "foil_position": float(rng.integers(1, length + 1)),
            }
            foil_records.append(DatapointRecord(
                "FOIL", image_id, orig_id, (), 0, "original", world.names[cats[t]],
                {**meta, "scrambled_language_id": scr_id},
            ))
            foil_records.append(DatapointRecord(
                "FOIL", image_id, foil_id, (), 0, "foiled", world.names[foil_cat], meta,
            ))

    visual = EmbeddingBank(vis_ids, np.array(vis_rows))
    language = EmbeddingBank(lang_ids, np.array(lang_rows))
    category_visual = {k: v for k, v in category_visual.items() if v}
    return SyntheticCorpus(visual, language, records, foil_records, category_visual,
                           {k: category_language[k] for k in category_visual})
