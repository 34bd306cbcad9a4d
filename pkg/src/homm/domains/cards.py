"""Two-card betting games over an 8-card deck, with an exact enumeration oracle.

Win probabilities come from ranking a hand against the 28 possible hands.
Two rules are provided:

``rank``
    fraction of all 28 hands (the hand itself included) whose score does not
    exceed this hand's score.  This is the default; it reproduces the
    published optimal rewards and ignore-mapping baselines.
``opponent``
    win + half-tie frequency against the 15 opponent hands that can be dealt
    from the 6 remaining cards.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

GAMES = ("high_card", "pairs", "straight_flush", "match", "blackjack")
ATTRIBUTES = ("losers", "suits_rule", "switch_suit")
GAME_LABELS = {"high_card": "High card", "pairs": "Pairs", "straight_flush": "Straight flush",
               "match": "Match", "blackjack": "Blackjack"}
BETS = (0, 1, 2)
BLACKJACK_LIMIT = 5


@dataclass(frozen=True, order=True)
class Card:
    value: int  # 1..4
    suit: int  # 0 or 1


DECK = tuple(Card(v, s) for v in range(1, 5) for s in range(2))
HANDS = tuple(itertools.combinations(DECK, 2))
HAND_INDEX = {h: i for i, h in enumerate(HANDS)}
assert len(HANDS) == 28


def hand_features(hand) -> np.ndarray:
    """Two-hot encoding over the 8 cards."""
    x = np.zeros(len(DECK))
    for c in hand:
        x[DECK.index(c)] = 1.0
    return x


HAND_FEATURES = np.stack([hand_features(h) for h in HANDS])


@dataclass(frozen=True)
class GameVariant:
    game: str
    losers: bool = False
    suits_rule: bool = False
    switch_suit: bool = False

    def __post_init__(self):
        if self.game not in GAMES:
            raise ValueError(f"unknown game {self.game!r}")

    @property
    def name(self) -> str:
        attrs = [a for a in ATTRIBUTES if getattr(self, a)]
        return "+".join([self.game] + attrs)

    @classmethod
    def from_name(cls, name: str) -> "GameVariant":
        game, *attrs = name.split("+")
        unknown = set(attrs) - set(ATTRIBUTES)
        if unknown:
            raise ValueError(f"unknown attributes {sorted(unknown)}")
        return cls(game, **{a: True for a in attrs})

    @property
    def preferred_suit(self) -> int:
        return 0 if self.switch_suit else 1


def all_variants(include_suits_rule: bool = True) -> list[GameVariant]:
    out = []
    for g in GAMES:
        for losers, suits, switch in itertools.product((False, True), repeat=3):
            if suits and not include_suits_rule:
                continue
            out.append(GameVariant(g, losers, suits, switch))
    return out


def _card_score(c: Card, pref: int) -> float:
    return c.value + 0.5 * (c.suit == pref)


def _suits_first(c: Card, pref: int) -> Card:
    # rank the card suit-major instead of value-major, re-expressed as a card
    r = 4 * (c.suit == pref) + (c.value - 1)
    return Card(r // 2 + 1, pref if r % 2 else 1 - pref)


def _high(hand, pref) -> float:
    a, b = sorted((_card_score(c, pref) for c in hand), reverse=True)
    return 10.0 * a + b


def _base_score(game: str, hand, pref: int) -> float:
    a, b = hand
    if game == "high_card":
        return _high(hand, pref)
    if game == "pairs":
        return _high(hand, pref) + 100.0 * (a.value == b.value)
    if game == "straight_flush":
        flush = abs(a.value - b.value) == 1 and a.suit == b.suit
        return _high(hand, pref) + 100.0 * flush
    if game == "match":
        gap = abs(a.value - b.value) + 0.5 * (a.suit != b.suit)
        return -100.0 * gap + _high(hand, pref)
    if game == "blackjack":
        total = a.value + b.value
        # busting scores below every live hand; smaller busts rank higher
        level = total if total <= BLACKJACK_LIMIT else -total
        return 100.0 * level + sum(_card_score(c, pref) for c in hand)
    raise ValueError(game)


def hand_score(variant: GameVariant, hand) -> float:
    pref = variant.preferred_suit
    if variant.suits_rule:
        hand = tuple(_suits_first(c, pref) for c in hand)
    s = _base_score(variant.game, hand, pref)
    return -s if variant.losers else s


@lru_cache(maxsize=None)
def _scores(variant: GameVariant) -> np.ndarray:
    return np.array([hand_score(variant, h) for h in HANDS])


@lru_cache(maxsize=None)
def win_probabilities(variant: GameVariant, rule: str = "rank") -> np.ndarray:
    """Win probability of each of the 28 hands, in ``HANDS`` order."""
    s = _scores(variant)
    if rule == "rank":
        p = (s[None, :] <= s[:, None]).sum(axis=1) / len(HANDS)
    elif rule == "opponent":
        p = np.empty(len(HANDS))
        for i, h in enumerate(HANDS):
            opp = [j for j, o in enumerate(HANDS) if not set(o) & set(h)]
            so = s[opp]
            p[i] = ((so < s[i]).sum() + 0.5 * (so == s[i]).sum()) / len(opp)
    else:
        raise ValueError(f"unknown win rule {rule!r}")
    p.setflags(write=False)
    return p


def win_probability(variant: GameVariant, hand, rule: str = "rank") -> float:
    return float(win_probabilities(variant, rule)[HAND_INDEX[tuple(sorted(hand))]])


def _policy_bets(policy) -> np.ndarray:
    if callable(policy):
        return np.array([policy(h) for h in HANDS], dtype=float)
    bets = np.asarray(policy, dtype=float)
    if bets.shape != (len(HANDS),):
        raise ValueError("policy must give one bet per hand")
    return bets


def expected_policy_reward(variant: GameVariant, policy, rule: str = "rank") -> float:
    """Mean over the equiprobable hands of bet * (2p - 1)."""
    p = win_probabilities(variant, rule)
    return float(np.mean(_policy_bets(policy) * (2.0 * p - 1.0)))


def optimal_policy(variant: GameVariant, rule: str = "rank") -> np.ndarray:
    p = win_probabilities(variant, rule)
    return np.where(2.0 * p - 1.0 > 0, 2.0, 0.0)


def optimal_expected_reward(variant: GameVariant, rule: str = "rank") -> float:
    return expected_policy_reward(variant, optimal_policy(variant, rule), rule)


def ignore_mapping_reward(source: GameVariant, target: GameVariant, rule: str = "rank") -> float:
    """Reward of playing the source game's optimal policy on the target game."""
    return expected_policy_reward(target, optimal_policy(source, rule), rule)


@dataclass
class CardEpisodes:
    hands: np.ndarray  # indices into HANDS
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def inputs(self) -> np.ndarray:
        return HAND_FEATURES[self.hands]

    @property
    def targets(self) -> np.ndarray:
        """One-hot action concatenated with the observed reward."""
        return np.concatenate([np.eye(3)[self.actions], self.rewards[:, None]], axis=1)

    def subset(self, idx) -> "CardEpisodes":
        return CardEpisodes(self.hands[idx], self.actions[idx], self.rewards[idx])

    def split(self, n_examples: int, rng: np.random.Generator):
        if not 0 < n_examples < len(self):
            raise ValueError("need at least one example and one probe")
        perm = rng.permutation(len(self))
        return self.subset(perm[:n_examples]), self.subset(perm[n_examples:])


def sample_episodes(variant: GameVariant, n: int, rng: np.random.Generator,
                    rule: str = "rank") -> CardEpisodes:
    """Uniform hands, uniform bets, reward +-bet with the hand's win probability."""
    if n < 1:
        raise ValueError("episode count must be positive")
    p = win_probabilities(variant, rule)
    hands = rng.integers(0, len(HANDS), size=n)
    actions = rng.integers(0, 3, size=n)
    win = rng.random(n) < p[hands]
    rewards = np.where(win, actions, -actions).astype(float)
    return CardEpisodes(hands, actions, rewards)


def apply_attribute_mapping(attribute: str, variant: GameVariant) -> GameVariant:
    if attribute not in ATTRIBUTES:
        raise ValueError(f"unknown attribute {attribute!r}")
    return replace(variant, **{attribute: not getattr(variant, attribute)})


def most_correlated_baseline(target: GameVariant, trained: Sequence[GameVariant],
                             rule: str = "rank") -> tuple[GameVariant, float]:
    """Play the optimal strategy of the trained game whose win-probability
    vector correlates best with the target's."""
    if not trained:
        raise ValueError("need at least one trained variant")
    pt = win_probabilities(target, rule)
    best, best_r = None, -np.inf
    for v in trained:
        pv = win_probabilities(v, rule)
        r = 1.0 if np.array_equal(pv, pt) else float(np.corrcoef(pv, pt)[0, 1])
        if r > best_r:
            best, best_r = v, r
    return best, ignore_mapping_reward(best, target, rule)


def classification_names() -> list[str]:
    return [f"is_{g}" for g in GAMES] + [f"is_{a}" for a in ATTRIBUTES]


def ground_truth_classification(kind: str, variant: GameVariant) -> int:
    name = kind.removeprefix("is_")
    if name in GAMES:
        return int(variant.game == name)
    if name in ATTRIBUTES:
        return int(getattr(variant, name))
    raise ValueError(f"unknown classification {kind!r}")


MAX_TOKENS = 4


def meta_task_tokens(name: str) -> list[str]:
    if name.startswith("is_"):
        return ["is", name[3:]]
    if name.startswith("toggle_"):
        return ["toggle", name[7:]]
    raise ValueError(f"unknown meta task {name!r}")


def task_tokens(variant: GameVariant) -> list[str]:
    """Basic-task description used by the language-alone comparison."""
    return [variant.game] + [a for a in ATTRIBUTES if getattr(variant, a)]


def tokenize_meta_task(name: str, length: int = MAX_TOKENS) -> list[str]:
    from ..nets import pad_tokens

    return pad_tokens(meta_task_tokens(name), length)


def vocabulary() -> list[str]:
    return ["is", "toggle"] + list(GAMES) + list(ATTRIBUTES)


def oracle_table(variants: Sequence[GameVariant], rule: str = "rank") -> list[dict]:
    """Per-variant oracle rows: win probabilities, optimal bets and values."""
    rows = []
    for v in variants:
        p = win_probabilities(v, rule)
        pol = optimal_policy(v, rule)
        losers = apply_attribute_mapping("losers", v)
        row = {
            "variant": v.name,
            "optimal_expected_reward": optimal_expected_reward(v, rule),
            "ignore_losers_reward": ignore_mapping_reward(v, losers, rule),
            "ignore_switch_suit_reward": ignore_mapping_reward(
                v, apply_attribute_mapping("switch_suit", v), rule),
        }
        for i, h in enumerate(HANDS):
            tag = "_".join(f"{c.value}{'ab'[c.suit]}" for c in h)
            row[f"p_{tag}"] = p[i]
            row[f"bet_{tag}"] = int(pol[i])
        rows.append(row)
    return rows


PolicyFn = Callable[[tuple], int]
