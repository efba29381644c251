"""Analytic scene model: object catalog, prompt grammar, conditional mixture.

A "scene" is a small grayscale grid on which each requested object either
appears (as a Gaussian blob at one of its candidate positions) or is dropped.
Conditioning a prompt therefore yields a finite Gaussian mixture over images:
one component per (presence pattern, position choice) combination, with
per-pixel variance ``s2`` shared by every component.  All downstream math
(scores, posteriors, attention analogues) is exact on this family.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

from .errors import EmptyTargets, GrammarError, UnknownObject, UsageError

GRID_SIZE = 16
BLOB_SIGMAS = (1.0, 1.5, 2.0)
COMPONENT_STD = 0.05

SUBJECT_IDS = ("cat", "dog", "fox", "owl", "frog",
               "crab", "deer", "mole", "swan", "toad")
THING_IDS = ("bench", "kite", "drum", "vase", "boat", "lamp")

# Candidate rows cycle through these pairs; subjects sit in the left band,
# things in the right band, so co-occurring blobs stay well separated.
_ROW_PAIRS = ((3, 8), (8, 13), (3, 13), (13, 8), (8, 3), (13, 3))
_SUBJECT_COL = 4
_THING_COL = 12


@dataclass(frozen=True)
class ObjectSpec:
    """One catalog entry: a blob shape plus where it is allowed to appear."""

    object_id: str
    sigma: float
    candidate_positions: tuple[tuple[int, int], ...]
    grid_size: int = GRID_SIZE

    def __post_init__(self):
        if self.sigma <= 0:
            raise UsageError(f"blob sigma must be positive, got {self.sigma}")
        if not self.candidate_positions:
            raise UsageError(f"object {self.object_id!r} needs at least one position")
        n = self.grid_size
        for (r, c) in self.candidate_positions:
            if not (0 <= r < n and 0 <= c < n):
                raise UsageError(f"position {(r, c)} outside {n}x{n} grid")

    def placed_template(self, position: tuple[int, int]) -> np.ndarray:
        """Blob evaluated on the grid with its peak (value 1) at ``position``."""
        r0, c0 = position
        rows = np.arange(self.grid_size, dtype=np.float64)[:, None]
        cols = np.arange(self.grid_size, dtype=np.float64)[None, :]
        d2 = (rows - r0) ** 2 + (cols - c0) ** 2
        return np.exp(-d2 / (2.0 * self.sigma**2))

    @cached_property
    def template(self) -> np.ndarray:
        """Canonical blob field, centered on the grid."""
        mid = self.grid_size // 2
        return self.placed_template((mid, mid))

    @cached_property
    def _placed_stack(self) -> np.ndarray:
        """Placed templates for every candidate position, shape (P, H, W)."""
        return np.stack([self.placed_template(p) for p in self.candidate_positions])

    @cached_property
    def _placed_energy(self) -> np.ndarray:
        """Squared L2 norm of each placed template, shape (P,)."""
        return np.einsum("pij,pij->p", self._placed_stack, self._placed_stack)

    def filter_responses(self, image: np.ndarray) -> np.ndarray:
        """Matched-filter response ``<image, g_p> / ||g_p||^2`` per position.

        A noiseless unit blob at candidate position p responds exactly 1.0 at
        that position.
        """
        overlaps = np.einsum("pij,ij->p", self._placed_stack, image)
        return overlaps / self._placed_energy


def default_catalog(blob_sigmas: tuple[float, ...] = BLOB_SIGMAS,
                    grid_size: int = GRID_SIZE) -> dict[str, ObjectSpec]:
    """Built-in catalog: 10 subjects plus 6 things, two positions each.

    Blob widths cycle through ``blob_sigmas`` in catalog order so adjacent
    entries stay visually distinct.
    """
    catalog: dict[str, ObjectSpec] = {}
    ids = list(SUBJECT_IDS) + list(THING_IDS)
    for i, object_id in enumerate(ids):
        if object_id in SUBJECT_IDS:
            col = _SUBJECT_COL
            pair = _ROW_PAIRS[SUBJECT_IDS.index(object_id) % len(_ROW_PAIRS)]
        else:
            col = _THING_COL
            pair = _ROW_PAIRS[THING_IDS.index(object_id) % len(_ROW_PAIRS)]
        positions = tuple((row, col) for row in pair)
        catalog[object_id] = ObjectSpec(
            object_id=object_id,
            sigma=blob_sigmas[i % len(blob_sigmas)],
            candidate_positions=positions,
            grid_size=grid_size,
        )
    return catalog


def load_catalog(path: str, grid_size: int = GRID_SIZE) -> dict[str, ObjectSpec]:
    """Read a catalog from a plain-text table.

    One line per object: ``id sigma r1,c1 r2,c2 ...``.  Blank lines and lines
    starting with ``#`` are skipped.
    """
    catalog: dict[str, ObjectSpec] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise UsageError(f"{path}:{lineno}: expected 'id sigma pos...'")
            object_id, sigma_text = parts[0], parts[1]
            if object_id in catalog:
                raise UsageError(f"{path}:{lineno}: duplicate object id {object_id!r}")
            try:
                sigma = float(sigma_text)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: bad sigma {sigma_text!r}") from exc
            positions = []
            for token in parts[2:]:
                rc = token.split(",")
                if len(rc) != 2:
                    raise UsageError(f"{path}:{lineno}: bad position {token!r}")
                try:
                    positions.append((int(rc[0]), int(rc[1])))
                except ValueError as exc:
                    raise UsageError(f"{path}:{lineno}: bad position {token!r}") from exc
            catalog[object_id] = ObjectSpec(
                object_id=object_id,
                sigma=sigma,
                candidate_positions=tuple(positions),
                grid_size=grid_size,
            )
    return catalog


def dump_catalog(catalog: dict[str, ObjectSpec], path: str) -> None:
    """Inverse of :func:`load_catalog` (positions as ``r,c`` tokens)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# id sigma positions...\n")
        for spec in catalog.values():
            tokens = " ".join(f"{r},{c}" for (r, c) in spec.candidate_positions)
            fh.write(f"{spec.object_id} {spec.sigma} {tokens}\n")


_PART_RE = re.compile(r"^a ([a-z][a-z0-9_-]*)$")


@dataclass(frozen=True)
class Prompt:
    """Prompt text plus its parsed, ordered target ids."""

    text: str
    targets: tuple[str, ...]


def prompt_text(targets: tuple[str, ...] | list[str]) -> str:
    """Render a target list back into the canonical prompt wording."""
    return " and ".join(f"a {t}" for t in targets)


def extract_targets(text: str, catalog: dict[str, ObjectSpec]) -> Prompt:
    """Parse ``"a X and a Y [and a Z]"`` into a :class:`Prompt`.

    Raises :class:`GrammarError` on malformed or duplicated targets and
    :class:`UnknownObject` when a token is not in the catalog.
    """
    cleaned = " ".join(text.strip().split())
    if not cleaned:
        raise GrammarError("empty prompt")
    parts = cleaned.split(" and ")
    if len(parts) > 3:
        raise GrammarError(f"at most 3 targets supported, got {len(parts)}")
    targets: list[str] = []
    for part in parts:
        m = _PART_RE.match(part)
        if m is None:
            raise GrammarError(f"cannot parse prompt fragment {part!r}")
        targets.append(m.group(1))
    dupes = {t for t in targets if targets.count(t) > 1}
    if dupes:
        raise GrammarError(f"duplicate target: {sorted(dupes)[0]!r}")
    for t in targets:
        if t not in catalog:
            raise UnknownObject(f"object {t!r} not in catalog")
    return Prompt(text=cleaned, targets=tuple(targets))


@dataclass(frozen=True)
class SceneComponent:
    """One mixture component: a presence/position combination and its weight.

    ``position_choice[i]`` is an index into target ``i``'s candidate position
    list, or ``None`` when the object is absent.
    """

    presence: tuple[int, ...]
    position_choice: tuple[int | None, ...]
    weight: float
    mean: np.ndarray

    def label(self, targets: tuple[str, ...]) -> str:
        bits = []
        for t, present, choice in zip(targets, self.presence, self.position_choice):
            bits.append(f"{t}@{choice}" if present else f"{t}@-")
        return "|".join(bits)


@dataclass(frozen=True)
class MixtureSpec:
    """Finite Gaussian mixture over images conditioned on one prompt.

    Components enumerate every presence pattern and every position choice of
    the present objects; weights multiply per-object faithfulness ``q_o``
    (split uniformly over candidate positions) against ``1 - q_o`` for
    absences.  The per-pixel component variance is homogeneous (``s2``).
    """

    targets: tuple[str, ...]
    objects: tuple[ObjectSpec, ...]
    q: tuple[float, ...]
    s2: float
    grid_size: int
    components: tuple[SceneComponent, ...]

    @cached_property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @cached_property
    def means_matrix(self) -> np.ndarray:
        """Component means flattened to shape ``(K, grid_size**2)``."""
        return np.stack([c.mean.ravel() for c in self.components])

    @cached_property
    def presence_matrix(self) -> np.ndarray:
        """Boolean ``(K, n_targets)``: which targets appear in component k."""
        return np.array([c.presence for c in self.components], dtype=bool)

    def object_index(self, object_id: str) -> int:
        try:
            return self.targets.index(object_id)
        except ValueError:
            raise UnknownObject(f"object {object_id!r} not among targets {self.targets}")

    def placed_template(self, object_id: str, component: SceneComponent) -> np.ndarray:
        """The object's unit-peak template as placed in one component."""
        i = self.object_index(object_id)
        choice = component.position_choice[i]
        if choice is None:
            raise UsageError(f"object {object_id!r} absent from component")
        spec = self.objects[i]
        return spec.placed_template(spec.candidate_positions[choice])

    @cached_property
    def _template_stacks(self) -> dict[str, np.ndarray]:
        """Per object: (K, H, W) placed templates, all-zero where absent."""
        stacks: dict[str, np.ndarray] = {}
        for i, (object_id, spec) in enumerate(zip(self.targets, self.objects)):
            stack = np.zeros((len(self.components), self.grid_size, self.grid_size))
            for k, comp in enumerate(self.components):
                choice = comp.position_choice[i]
                if choice is not None:
                    stack[k] = spec._placed_stack[choice]
            stacks[object_id] = stack
        return stacks

    def template_stack(self, object_id: str) -> np.ndarray:
        self.object_index(object_id)  # raises UnknownObject for non-targets
        return self._template_stacks[object_id]


def render_mean_image(objects: tuple[ObjectSpec, ...],
                      positions: tuple[tuple[int, int] | None, ...],
                      grid_size: int) -> np.ndarray:
    """Sum of placed templates for the present objects (absent -> skipped)."""
    image = np.zeros((grid_size, grid_size))
    for spec, pos in zip(objects, positions):
        if pos is not None:
            image += spec.placed_template(pos)
    return image


def build_conditional_mixture(targets: tuple[str, ...] | list[str],
                              q: float | dict[str, float],
                              catalog: dict[str, ObjectSpec],
                              s2: float = COMPONENT_STD**2) -> MixtureSpec:
    """Enumerate the conditional mixture for a target set.

    ``q`` is either one faithfulness value shared by every target or a map
    from object id to its value; each must lie in (0, 1].  Zero-weight
    combinations (an absence under ``q_o = 1``) are dropped.
    """
    targets = tuple(targets)
    if not targets:
        raise EmptyTargets("mixture requested for an empty target set")
    if len(set(targets)) != len(targets):
        raise GrammarError("duplicate target in mixture request")
    specs = []
    for t in targets:
        if t not in catalog:
            raise UnknownObject(f"object {t!r} not in catalog")
        specs.append(catalog[t])
    if isinstance(q, dict):
        q_vec = tuple(float(q[t]) for t in targets)
    else:
        q_vec = tuple(float(q) for _ in targets)
    for t, q_o in zip(targets, q_vec):
        if not (0.0 < q_o <= 1.0):
            raise UsageError(f"faithfulness for {t!r} must be in (0, 1], got {q_o}")
    if s2 <= 0:
        raise UsageError(f"component variance must be positive, got {s2}")
    grid_size = specs[0].grid_size
    if any(s.grid_size != grid_size for s in specs):
        raise UsageError("mixed grid sizes in one mixture")

    # Per object: None for absent, else an index into its candidate positions.
    per_object_choices = []
    for spec, q_o in zip(specs, q_vec):
        choices: list[tuple[int | None, float]] = []
        if q_o < 1.0:
            choices.append((None, 1.0 - q_o))
        share = q_o / len(spec.candidate_positions)
        choices.extend((j, share) for j in range(len(spec.candidate_positions)))
        per_object_choices.append(choices)

    components = []
    for combo in product(*per_object_choices):
        weight = 1.0
        presence = []
        position_choice = []
        positions = []
        for spec, (choice, w) in zip(specs, combo):
            weight *= w
            presence.append(0 if choice is None else 1)
            position_choice.append(choice)
            positions.append(None if choice is None
                             else spec.candidate_positions[choice])
        components.append(SceneComponent(
            presence=tuple(presence),
            position_choice=tuple(position_choice),
            weight=weight,
            mean=render_mean_image(tuple(specs), tuple(positions), grid_size),
        ))

    return MixtureSpec(
        targets=targets,
        objects=tuple(specs),
        q=q_vec,
        s2=float(s2),
        grid_size=grid_size,
        components=tuple(components),
    )


def completeness_probability(mixture: MixtureSpec) -> float:
    """Total weight of components where every target is present.

    Equals the product of the per-object faithfulness values; position splits
    never change presence marginals.
    """
    total = 0.0
    for comp in mixture.components:
        if all(comp.presence):
            total += comp.weight
    return total


def pattern_distribution(mixture: MixtureSpec) -> dict[tuple[int, ...], float]:
    """Marginal probability of each presence pattern (positions summed out)."""
    dist: dict[tuple[int, ...], float] = {}
    for comp in mixture.components:
        dist[comp.presence] = dist.get(comp.presence, 0.0) + comp.weight
    return dist
