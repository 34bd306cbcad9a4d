import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from homm.domains import cards
from homm.domains.cards import HANDS, Card, GameVariant

PUBLISHED_OPTIMAL = {"high_card": 0.531, "pairs": 0.532, "match": 0.541,
                     "straight_flush": 0.536, "blackjack": 0.592}

variants = st.sampled_from(cards.all_variants())


def hand(*cards_):
    return tuple(sorted(Card(v, s) for v, s in cards_))


class TestDeck:
    def test_counts(self):
        assert len(cards.DECK) == 8 and len(HANDS) == 28
        assert len(cards.all_variants()) == 40
        assert len(cards.all_variants(include_suits_rule=False)) == 20

    def test_features_two_hot(self):
        assert np.all(cards.HAND_FEATURES.sum(axis=1) == 2)
        assert len({tuple(r) for r in cards.HAND_FEATURES}) == 28

    def test_names_round_trip(self):
        for v in cards.all_variants():
            assert GameVariant.from_name(v.name) == v

    def test_unknown_game_or_attribute(self):
        with pytest.raises(ValueError):
            GameVariant("poker")
        with pytest.raises(ValueError):
            GameVariant.from_name("pairs+wild")


class TestScores:
    def test_royal_flush_wins(self):
        v = GameVariant("straight_flush")
        royal = hand((4, v.preferred_suit), (3, v.preferred_suit))
        s = cards.hand_score(v, royal)
        assert all(s > cards.hand_score(v, h) for h in HANDS if h != royal)
        assert cards.win_probability(v, royal) == 1.0
        assert cards.win_probability(v, royal, "opponent") == 1.0

    def test_blackjack_bust_below_live(self):
        v = GameVariant("blackjack")
        live = [h for h in HANDS if h[0].value + h[1].value <= 5]
        bust = [h for h in HANDS if h[0].value + h[1].value > 5]
        assert min(cards.hand_score(v, h) for h in live) > max(cards.hand_score(v, h) for h in bust)
        ordered = sorted(live, key=lambda h: cards.hand_score(v, h))
        sums = [a.value + b.value for a, b in ordered]
        assert sums == sorted(sums)

    def test_switch_suit_swaps_precedence(self):
        a, b = hand((4, 0), (1, 0)), hand((4, 1), (1, 1))
        v = GameVariant("high_card")
        w = cards.apply_attribute_mapping("switch_suit", v)
        assert (cards.hand_score(v, a) > cards.hand_score(v, b)) != (
            cards.hand_score(w, a) > cards.hand_score(w, b))

    @given(variants)
    def test_losers_reverses_order(self, v):
        s = np.array([cards.hand_score(v, h) for h in HANDS])
        w = cards.apply_attribute_mapping("losers", v)
        t = np.array([cards.hand_score(w, h) for h in HANDS])
        assert np.argmax(s) == np.argmin(t) and np.argmin(s) == np.argmax(t)
        assert np.array_equal(t, -s)


class TestWinProbabilities:
    @given(variants)
    def test_losers_symmetry_opponent_rule(self, v):
        p = cards.win_probabilities(v, "opponent")
        q = cards.win_probabilities(cards.apply_attribute_mapping("losers", v), "opponent")
        assert np.allclose(p + q, 1.0, rtol=0, atol=1e-15)

    @given(variants)
    def test_losers_symmetry_rank_rule(self, v):
        # each hand counts itself (and its ties) on both sides
        s = cards._scores(v)
        ties = (s[None, :] == s[:, None]).sum(axis=1)
        p = cards.win_probabilities(v)
        q = cards.win_probabilities(cards.apply_attribute_mapping("losers", v))
        assert np.allclose(p + q, 1.0 + ties / 28, rtol=0, atol=1e-15)

    @given(variants)
    def test_monotone_in_score(self, v):
        s = cards._scores(v)
        p = cards.win_probabilities(v)
        order = np.argsort(s, kind="stable")
        assert np.all(np.diff(p[order]) >= 0)
        assert np.all((p >= 0) & (p <= 1))

    def test_opponent_rule_card_removal_breaks_monotonicity(self):
        # holding a pair blocks the opponent's pairs, so a weaker hand can win more often
        v = GameVariant("pairs")
        s = cards._scores(v)
        p = cards.win_probabilities(v, "opponent")
        order = np.argsort(s, kind="stable")
        assert np.any(np.diff(p[order]) < 0)

    def test_losers_correlation_negative_one(self):
        for g in cards.GAMES:
            v = GameVariant(g)
            p = cards.win_probabilities(v, "opponent")
            q = cards.win_probabilities(cards.apply_attribute_mapping("losers", v), "opponent")
            assert np.corrcoef(p, q)[0, 1] == pytest.approx(-1.0)

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            cards.win_probabilities(GameVariant("pairs"), "house")


class TestRewards:
    @pytest.mark.parametrize("game", cards.GAMES)
    def test_optimal_matches_published(self, game):
        assert cards.optimal_expected_reward(GameVariant(game)) == pytest.approx(
            PUBLISHED_OPTIMAL[game], abs=0.01)

    def test_exact_values(self):
        # exact fractions of the enumeration: 15/28 and 29/49
        for g in ("high_card", "pairs", "straight_flush", "match"):
            assert cards.optimal_expected_reward(GameVariant(g)) == pytest.approx(15 / 28)
        assert cards.optimal_expected_reward(GameVariant("blackjack")) == pytest.approx(29 / 49)

    def test_oracle_runtime(self):
        cards.win_probabilities.cache_clear()
        cards._scores.cache_clear()
        t = time.perf_counter()
        for v in cards.all_variants():
            cards.optimal_expected_reward(v)
            cards.optimal_expected_reward(v, "opponent")
        assert time.perf_counter() - t < 1.0

    @given(variants)
    def test_losers_variant_same_optimum(self, v):
        w = cards.apply_attribute_mapping("losers", v)
        assert cards.optimal_expected_reward(v, "opponent") == pytest.approx(
            cards.optimal_expected_reward(w, "opponent"))

    def test_optimal_is_mean_of_positive_part(self):
        for v in cards.all_variants():
            p = cards.win_probabilities(v)
            assert cards.optimal_expected_reward(v) == pytest.approx(
                np.mean(np.maximum(0.0, 2 * (2 * p - 1))))

    def test_trivial_policies(self):
        v = GameVariant("match")
        assert cards.expected_policy_reward(v, lambda h: 0) == 0.0
        p = cards.win_probabilities(v, "opponent")
        uniform = np.mean([cards.expected_policy_reward(v, np.full(28, b), "opponent")
                           for b in cards.BETS])
        assert uniform == pytest.approx(np.mean(2 * p - 1))

    def test_ignore_losers_baseline(self):
        for g in ("high_card", "pairs", "straight_flush", "match"):
            r = cards.ignore_mapping_reward(GameVariant(g), GameVariant(g, losers=True))
            assert r == pytest.approx(-0.45, abs=0.05)

    def test_policy_shape_checked(self):
        with pytest.raises(ValueError):
            cards.expected_policy_reward(GameVariant("pairs"), np.zeros(5))


class TestEpisodes:
    def test_reward_magnitude_equals_bet(self):
        ep = cards.sample_episodes(GameVariant("pairs"), 500, np.random.default_rng(0))
        assert np.array_equal(np.abs(ep.rewards), ep.actions.astype(float))
        assert ep.inputs.shape == (500, 8) and ep.targets.shape == (500, 4)

    def test_bet_two_mean_reward(self):
        v = GameVariant("blackjack")
        ep = cards.sample_episodes(v, 60_000, np.random.default_rng(1))
        r = ep.rewards[ep.actions == 2]
        expected = 2 * (2 * cards.win_probabilities(v).mean() - 1)
        assert abs(r.mean() - expected) < 4 * r.std() / np.sqrt(len(r))

    def test_per_hand_win_rates(self):
        # chi-square goodness of fit of per-hand win counts against the oracle
        v = GameVariant("straight_flush", switch_suit=True)
        ep = cards.sample_episodes(v, 80_000, np.random.default_rng(2))
        bet = ep.actions > 0
        p = cards.win_probabilities(v)
        chi2 = 0.0
        dof = 0
        for i in range(28):
            sel = bet & (ep.hands == i)
            n, k = sel.sum(), (ep.rewards[sel] > 0).sum()
            if 0 < p[i] < 1:
                chi2 += (k - n * p[i]) ** 2 / (n * p[i] * (1 - p[i]))
                dof += 1
            else:
                assert k == (n if p[i] == 1 else 0)
        # 99.9th percentile of chi-square with 27 degrees of freedom is 55.5
        assert dof <= 27 and chi2 < 55.5

    def test_hands_and_actions_uniform(self):
        ep = cards.sample_episodes(GameVariant("pairs"), 28_000, np.random.default_rng(3))
        assert np.bincount(ep.hands, minlength=28).min() > 800
        assert np.allclose(np.bincount(ep.actions) / 28_000, 1 / 3, atol=0.015)

    def test_deterministic(self):
        a = cards.sample_episodes(GameVariant("match"), 50, np.random.default_rng(4))
        b = cards.sample_episodes(GameVariant("match"), 50, np.random.default_rng(4))
        assert np.array_equal(a.rewards, b.rewards) and np.array_equal(a.hands, b.hands)

    def test_split(self):
        ep = cards.sample_episodes(GameVariant("match"), 10, np.random.default_rng(5))
        a, b = ep.split(3, np.random.default_rng(6))
        assert len(a) == 3 and len(b) == 7


class TestMappings:
    @given(variants, st.sampled_from(cards.ATTRIBUTES))
    def test_involution(self, v, attr):
        once = cards.apply_attribute_mapping(attr, v)
        assert once != v and cards.apply_attribute_mapping(attr, once) == v

    def test_unknown_attribute(self):
        with pytest.raises(ValueError):
            cards.apply_attribute_mapping("wild", GameVariant("pairs"))

    def test_most_correlated_identical_target(self):
        v = GameVariant("pairs")
        best, r = cards.most_correlated_baseline(v, cards.all_variants())
        assert r == pytest.approx(cards.optimal_expected_reward(v))

    def test_most_correlated_targeted_holdout(self):
        pool = cards.all_variants(include_suits_rule=False)
        held = [v for v in pool if v.game == "straight_flush" and v.losers]
        trained = [v for v in pool if v not in held]
        best, r = cards.most_correlated_baseline(GameVariant("straight_flush", losers=True), trained)
        assert best == GameVariant("high_card", losers=True)
        # published value 0.274; the exact enumeration gives 57/196
        assert r == pytest.approx(57 / 196)
        assert abs(r - 0.274) < 0.02

    def test_most_correlated_needs_trained(self):
        with pytest.raises(ValueError):
            cards.most_correlated_baseline(GameVariant("pairs"), [])


class TestLanguage:
    def test_tokens(self):
        assert cards.tokenize_meta_task("toggle_losers") == ["<PAD>", "<PAD>", "toggle", "losers"]
        assert cards.tokenize_meta_task("is_blackjack")[-2:] == ["is", "blackjack"]

    def test_classifications(self):
        v = GameVariant("blackjack", losers=True)
        assert cards.ground_truth_classification("is_blackjack", v) == 1
        assert cards.ground_truth_classification("is_pairs", v) == 0
        assert cards.ground_truth_classification("is_losers", v) == 1
        assert len(cards.classification_names()) == 8

    def test_vocabulary(self):
        vocab = set(cards.vocabulary())
        for n in cards.classification_names() + [f"toggle_{a}" for a in cards.ATTRIBUTES]:
            assert set(cards.meta_task_tokens(n)) <= vocab
