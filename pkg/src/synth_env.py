"""Synthetic Bradley-Terry alignment problems and their datasets."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .core import PromptDist, RewardTable, SoftmaxPolicy, sigmoid
from .errors import ArgumentError, DataError, DimensionError, DomainError
from .logger import get_logger

Seed = Union[int, np.random.SeedSequence]


def derive_seed(seed: Seed, *keys: int) -> np.random.SeedSequence:
    """Independent child stream for ``keys`` under ``seed``.

    Streams depend only on ``(seed, keys)``, never on how many siblings exist.
    """

    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(
            entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + tuple(keys)
        )
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(keys))


def make_rng(seed: Seed) -> np.random.Generator:
    """Counter-based generator (Philox) for ``seed``."""

    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True, eq=False)
class Environment:
    nu0: PromptDist
    r_star: RewardTable
    pi_data: SoftmaxPolicy
    pi_ref: SoftmaxPolicy

    def __post_init__(self) -> None:
        shape = self.r_star.shape
        if self.pi_data.shape != shape or self.pi_ref.shape != shape:
            raise DimensionError("reward table and policies must share one shape")
        if shape[0] != self.nu0.num_prompts:
            raise DimensionError("prompt distribution does not match the reward table")
        if self.r_star.r_min < 0:
            raise DomainError("the latent reward needs 0 <= r_min")

    @property
    def num_prompts(self) -> int:
        return self.r_star.shape[0]

    @property
    def num_responses(self) -> int:
        return self.r_star.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.r_star.shape


@dataclass(frozen=True)
class PreferenceExample:
    prompt: int
    chosen: int
    rejected: int
    z: int
    rating_gap: Optional[float] = None


class Dataset:
    """Ordered preference examples stored column-wise.

    Absent ratings are ``NaN`` in :attr:`rating_gaps`.
    """

    __slots__ = ("prompts", "chosen", "rejected", "z", "rating_gaps", "seed")

    def __init__(
        self,
        prompts: np.ndarray,
        chosen: np.ndarray,
        rejected: np.ndarray,
        z: np.ndarray,
        rating_gaps: np.ndarray,
        seed: Optional[int] = None,
    ) -> None:
        self.prompts = np.asarray(prompts, dtype=np.int64)
        self.chosen = np.asarray(chosen, dtype=np.int64)
        self.rejected = np.asarray(rejected, dtype=np.int64)
        self.z = np.asarray(z, dtype=np.int8)
        self.rating_gaps = np.asarray(rating_gaps, dtype=float)
        self.seed = seed
        n = self.prompts.shape[0]
        for name in ("chosen", "rejected", "z", "rating_gaps"):
            if getattr(self, name).shape != (n,):
                raise DimensionError(f"column {name} does not have {n} entries")
        for column in (self.prompts, self.chosen, self.rejected):
            column.setflags(write=False)
        self.z.setflags(write=False)
        self.rating_gaps.setflags(write=False)

    @classmethod
    def empty(cls, seed: Optional[int] = None) -> "Dataset":
        none = np.zeros(0, dtype=np.int64)
        return cls(none, none, none, none, np.zeros(0), seed)

    @classmethod
    def from_examples(
        cls, examples: Sequence[PreferenceExample], seed: Optional[int] = None
    ) -> "Dataset":
        gaps = [np.nan if ex.rating_gap is None else float(ex.rating_gap) for ex in examples]
        return cls(
            np.array([ex.prompt for ex in examples], dtype=np.int64),
            np.array([ex.chosen for ex in examples], dtype=np.int64),
            np.array([ex.rejected for ex in examples], dtype=np.int64),
            np.array([ex.z for ex in examples], dtype=np.int8),
            np.array(gaps, dtype=float),
            seed,
        )

    def __len__(self) -> int:
        return int(self.prompts.shape[0])

    def __iter__(self) -> Iterator[PreferenceExample]:
        for i in range(len(self)):
            gap = self.rating_gaps[i]
            yield PreferenceExample(
                int(self.prompts[i]),
                int(self.chosen[i]),
                int(self.rejected[i]),
                int(self.z[i]),
                None if math.isnan(gap) else float(gap),
            )

    @property
    def examples(self) -> list[PreferenceExample]:
        return list(self)

    @property
    def rated_mask(self) -> np.ndarray:
        return ~np.isnan(self.rating_gaps)

    @property
    def num_rated(self) -> int:
        return int(self.rated_mask.sum())

    @property
    def fully_rated(self) -> bool:
        return self.num_rated == len(self)

    def validate(self, num_prompts: int, num_responses: int) -> None:
        if len(self) == 0:
            return
        if self.prompts.min() < 0 or self.prompts.max() >= num_prompts:
            raise DimensionError("prompt index out of range")
        responses = np.concatenate([self.chosen, self.rejected])
        if responses.min() < 0 or responses.max() >= num_responses:
            raise DimensionError("response index out of range")

    def with_gaps(self, gaps: np.ndarray) -> "Dataset":
        return Dataset(self.prompts, self.chosen, self.rejected, self.z, gaps, self.seed)

    def with_seed(self, seed: Optional[int]) -> "Dataset":
        return Dataset(self.prompts, self.chosen, self.rejected, self.z, self.rating_gaps, seed)

    def strip_ratings(self) -> "Dataset":
        return self.with_gaps(np.full(len(self), np.nan))

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            self.prompts[mask],
            self.chosen[mask],
            self.rejected[mask],
            self.z[mask],
            self.rating_gaps[mask],
            self.seed,
        )

    def rated(self) -> "Dataset":
        return self.subset(self.rated_mask)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.prompts, other.prompts]),
            np.concatenate([self.chosen, other.chosen]),
            np.concatenate([self.rejected, other.rejected]),
            np.concatenate([self.z, other.z]),
            np.concatenate([self.rating_gaps, other.rating_gaps]),
            self.seed,
        )


class RatingMode(str, Enum):
    EXACT = "EXACT"
    GAUSSIAN = "GAUSSIAN"
    BIASED = "BIASED"


@dataclass(frozen=True, eq=False)
class RatingModel:
    mode: RatingMode = RatingMode.EXACT
    variance: float = 0.0
    table: Optional[RewardTable] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", RatingMode(self.mode))
        if not math.isfinite(self.variance) or self.variance < 0:
            raise ArgumentError(f"rating variance must be >= 0, got {self.variance}")
        if self.mode is RatingMode.BIASED and self.table is None:
            raise ArgumentError("BIASED ratings need a reward table")

    @classmethod
    def exact(cls) -> "RatingModel":
        return cls(RatingMode.EXACT)

    @classmethod
    def gaussian(cls, variance: float) -> "RatingModel":
        return cls(RatingMode.GAUSSIAN, float(variance))

    @classmethod
    def biased(cls, table: RewardTable) -> "RatingModel":
        return cls(RatingMode.BIASED, 0.0, table)

    def mean_table(self, env: Environment) -> np.ndarray:
        """Reward whose gaps are the mean rating gap."""

        if self.mode is RatingMode.BIASED:
            assert self.table is not None
            if self.table.shape != env.shape:
                raise DimensionError("biased rating table does not match the environment")
            return self.table.values
        return env.r_star.values

    @property
    def noise_variance(self) -> float:
        return self.variance if self.mode is RatingMode.GAUSSIAN else 0.0


@dataclass(frozen=True)
class CorruptionSpec:
    swap_fraction: float = 0.0
    noise_variance: float = 0.0
    rating_obs_prob: float = 1.0

    def __post_init__(self) -> None:
        _check_unit("swap_fraction", self.swap_fraction)
        _check_unit("rating_obs_prob", self.rating_obs_prob)
        if not math.isfinite(self.noise_variance) or self.noise_variance < 0:
            raise ArgumentError(f"noise_variance must be >= 0, got {self.noise_variance}")

    def apply(self, ds: Dataset, seed: Seed) -> Dataset:
        """Swap, then add noise, then mask, each on its own child stream."""

        out = corrupt_swap(ds, self.swap_fraction, derive_seed(seed, 0))
        out = corrupt_noise(out, self.noise_variance, derive_seed(seed, 1))
        return mask_ratings(out, self.rating_obs_prob, derive_seed(seed, 2))


def _check_unit(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ArgumentError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class EnvSpec:
    """Generator parameters for the desk-scale instance."""

    num_prompts: int = 8
    num_responses: int = 6
    r_max: float = 2.0
    reward_seed: int = 0
    prompt_concentration: Optional[float] = None
    data_logit_scale: float = 0.0
    ref_logit_scale: Optional[float] = None

    def __post_init__(self) -> None:
        if self.num_prompts < 1 or self.num_responses < 2:
            raise ArgumentError("need at least one prompt and two responses")
        if not self.r_max > 0:
            raise ArgumentError(f"r_max must be positive, got {self.r_max}")


def make_environment(spec: EnvSpec) -> Environment:
    """Draw ν₀, r* ~ U[0, r_max] and the data/reference policies.

    With the default scales ν₀ and π_data = π_ref are uniform.
    """

    rng = make_rng(derive_seed(spec.reward_seed, 0))
    shape = (spec.num_prompts, spec.num_responses)
    if spec.prompt_concentration is None:
        nu0 = PromptDist.uniform(spec.num_prompts)
    else:
        nu0 = PromptDist.from_unnormalised(
            rng.dirichlet(np.full(spec.num_prompts, spec.prompt_concentration))
        )
    r_star = RewardTable(rng.uniform(0.0, spec.r_max, size=shape), 0.0, spec.r_max)
    pi_data = SoftmaxPolicy(spec.data_logit_scale * rng.standard_normal(shape))
    if spec.ref_logit_scale is None:
        pi_ref = pi_data
    else:
        pi_ref = SoftmaxPolicy(spec.ref_logit_scale * rng.standard_normal(shape))
    return Environment(nu0, r_star, pi_data, pi_ref)


def _draw_responses(rng: np.random.Generator, cdf: np.ndarray) -> np.ndarray:
    u = rng.random(cdf.shape[0])
    picks = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(picks, cdf.shape[1] - 1)


def sample_dataset(env: Environment, n: int, rating: RatingModel, seed: Seed) -> Dataset:
    """Draw ``n`` labelled comparisons from the Bradley-Terry model of ``env``.

    ``z = 1`` records that the first of the two i.i.d. draws won.
    """

    if n < 1:
        raise ArgumentError(f"dataset size must be >= 1, got {n}")
    rng = make_rng(seed)
    prompts = rng.choice(env.num_prompts, size=n, p=env.nu0.weights)
    cdf = np.cumsum(env.pi_data.probs, axis=1)[prompts]
    first = _draw_responses(rng, cdf)
    second = _draw_responses(rng, cdf)

    reward = env.r_star.values
    win_prob = sigmoid(reward[prompts, first] - reward[prompts, second])
    z = (rng.random(n) < win_prob).astype(np.int8)
    chosen = np.where(z == 1, first, second)
    rejected = np.where(z == 1, second, first)

    mean = rating.mean_table(env)
    gaps = mean[prompts, chosen] - mean[prompts, rejected]
    if rating.mode is RatingMode.GAUSSIAN and rating.variance > 0:
        gaps = gaps + rng.normal(0.0, math.sqrt(rating.variance), size=n)

    seed_value = int(seed) if not isinstance(seed, np.random.SeedSequence) else None
    ds = Dataset(prompts, chosen, rejected, z, gaps, seed_value)
    get_logger("data").debug("Sampled %d comparisons (%s ratings)", n, rating.mode.value)
    return ds


def corrupt_swap(ds: Dataset, fraction: float, seed: Seed) -> Dataset:
    """Swap the scores of a uniformly chosen ``⌊fraction·N⌋`` examples.

    With only gaps stored a score swap is a gap negation; preference bits stay.
    """

    _check_unit("fraction", fraction)
    count = int(math.floor(fraction * len(ds) + 1e-9))
    if count == 0:
        return ds
    rng = make_rng(seed)
    picked = rng.choice(len(ds), size=count, replace=False)
    gaps = ds.rating_gaps.copy()
    gaps[picked] = -gaps[picked]
    return ds.with_gaps(gaps)


def corrupt_noise(ds: Dataset, variance: float, seed: Seed) -> Dataset:
    """Add i.i.d. ``N(0, variance)`` noise to every present rating gap."""

    if not math.isfinite(variance) or variance < 0:
        raise ArgumentError(f"noise variance must be >= 0, got {variance}")
    if variance == 0:
        return ds
    rng = make_rng(seed)
    noise = rng.normal(0.0, math.sqrt(variance), size=len(ds))
    return ds.with_gaps(ds.rating_gaps + noise)


def mask_ratings(ds: Dataset, obs_prob: float, seed: Seed) -> Dataset:
    """Keep each rating independently with probability ``obs_prob``."""

    _check_unit("obs_prob", obs_prob)
    if obs_prob == 1.0:
        return ds
    rng = make_rng(seed)
    keep = rng.random(len(ds)) < obs_prob
    return ds.with_gaps(np.where(keep, ds.rating_gaps, np.nan))


def split_observations(
    ds: Dataset, p_rat: float, p_rank: float, seed: Seed
) -> tuple[Dataset, Dataset]:
    """Split collected pairs into a ranking set and a rating set.

    Each pair contributes its ranking with probability ``p_rank`` and its
    rating (when it has one) with probability ``p_rat``, independently.
    """

    _check_unit("p_rat", p_rat)
    _check_unit("p_rank", p_rank)
    rng = make_rng(seed)
    rank_keep = rng.random(len(ds)) < p_rank
    rat_keep = rng.random(len(ds)) < p_rat
    ds_rank = ds.subset(rank_keep).strip_ratings()
    ds_rated = ds.subset(rat_keep & ds.rated_mask)
    return ds_rank, ds_rated


def empirical_err_rating(ds: Dataset, env: Environment) -> float:
    """Mean squared error of the observed gaps against the latent gaps."""

    rated = ds.rated()
    if len(rated) == 0:
        raise DataError("no rated examples")
    reward = env.r_star.values
    true_gaps = reward[rated.prompts, rated.chosen] - reward[rated.prompts, rated.rejected]
    return math.fsum((rated.rating_gaps - true_gaps) ** 2) / len(rated)
