import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relisten.dataio import (
    ListeningEvent,
    ParseError,
    Session,
    SessionSequence,
    build_catalog,
    build_sequences,
    eval_counts,
    parse_events,
    sessionize,
    split_chronological,
)


def ev(user, song, t):
    return ListeningEvent(user, song, t)


class TestParseEvents:
    def test_single_line(self):
        assert parse_events(io.StringIO("u1\ts9\t100\n")) == [ev("u1", "s9", 100)]

    def test_empty(self):
        out = parse_events(io.StringIO(""))
        assert out == [] and out.skipped == 0

    def test_bad_timestamp_skipped_and_counted(self):
        lines = [f"u1\ts{i}\t{i}" for i in range(10)]
        lines.insert(4, "u1\ts9\tabc")
        out = parse_events(io.StringIO("\n".join(lines)))
        assert len(out) == 10
        assert out.skipped == 1
        assert [e.timestamp for e in out] == list(range(10))

    def test_comments_ignored(self):
        assert parse_events(["# header\n", "u\ts\t1\n"]) == [ev("u", "s", 1)]

    def test_too_many_malformed_aborts(self):
        lines = [f"u1\ts{i}\t{i}" for i in range(10)] + ["bad", "u\ts\tx"]
        with pytest.raises(ParseError):
            parse_events(lines)

    def test_event_invariants(self):
        with pytest.raises(ValueError):
            ListeningEvent("u", "s", -1)
        with pytest.raises(ValueError):
            ListeningEvent("", "s", 1)


class TestSessionize:
    def test_gap_rule(self):
        events = [ev("u", "a", 0), ev("u", "b", 600), ev("u", "c", 2000), ev("u", "d", 2100)]
        sessions = sessionize(events, gap_seconds=1200, k_max=10, min_session_len=1)["u"]
        cat = build_catalog(events)
        assert [s.songs for s in sessions] == [
            (cat.index("a"), cat.index("b")),
            (cat.index("c"), cat.index("d")),
        ]
        assert (sessions[0].start_time, sessions[0].end_time) == (0, 600)

    def test_gap_exactly_equal_splits(self):
        events = [ev("u", "a", 0), ev("u", "b", 1200)]
        assert len(sessionize(events, 1200, 10, min_session_len=1)["u"]) == 2

    def test_first_k_songs(self):
        events = [ev("u", f"s{i:02d}", 10 * i) for i in range(12)]
        (s,) = sessionize(events, 1200, 10)["u"]
        assert len(s) == 10
        cat = build_catalog(events)
        assert s.songs == tuple(cat.index(f"s{i:02d}") for i in range(10))

    def test_repeats_collapse_and_short_session_dropped(self):
        events = [ev("u", "a", 0), ev("u", "a", 10), ev("u", "a", 20)]
        assert sessionize(events, 1200, 10, min_session_len=2)["u"] == []

    def test_duplicates_do_not_use_k_slots(self):
        events = [ev("u", "a", 0), ev("u", "a", 10), ev("u", "b", 20), ev("u", "c", 30)]
        (s,) = sessionize(events, 1200, 2)["u"]
        assert len(s) == 2

    def test_unsorted_input(self):
        events = [ev("u", "b", 600), ev("u", "a", 0)]
        (s,) = sessionize(events, 1200, 10)["u"]
        assert s.start_time == 0

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(1, 3000)), min_size=1, max_size=40))
    def test_resessionizing_kept_bursts_is_stable(self, steps):
        # bursts of events separated by >= gap reproduce the same boundaries
        gap = 1200
        events, t = [], 0
        for song, dt in steps:
            t += dt
            events.append(ev("u", f"s{song}", t))
        cat = build_catalog(events)
        first = sessionize(events, gap, 10, min_session_len=1, catalog=cat)["u"]
        kept = [e for e in events if any(s.start_time <= e.timestamp <= s.end_time for s in first)]
        again = sessionize(kept, gap, 10, min_session_len=1, catalog=cat)["u"]
        assert [(s.start_time, s.end_time, s.songs) for s in again] == [
            (s.start_time, s.end_time, s.songs) for s in first
        ]


def sessions_at(n, start=0, spacing=10_000):
    return [Session((i % 7, 7 + i % 5), start + i * spacing, start + i * spacing + 100) for i in range(n)]


class TestBuildSequences:
    @pytest.mark.parametrize("n,expected", [(21, 1), (31, 3), (20, 0)])
    def test_window_counts(self, n, expected):
        out = build_sequences({"u": sessions_at(n)}, L=20, step=5)
        assert len(out.get("u", [])) == expected

    def test_offsets_and_target(self):
        sess = sessions_at(31)
        seqs = build_sequences({"u": sess}, L=20, step=5)["u"]
        assert [s.history[0] for s in seqs] == [sess[0], sess[5], sess[10]]
        assert seqs[-1].target == sess[30]

    def test_min_sessions_filter(self):
        assert build_sequences({"u": sessions_at(25)}, L=20, step=5, min_sessions_per_user=30) == {}

    def test_chronology_enforced(self):
        a, b = Session((1, 2), 100, 200), Session((3, 4), 150, 300)
        with pytest.raises(ValueError):
            SessionSequence("u", (a,), b)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.lists(st.integers(1200, 10**6), min_size=2, max_size=30))
    def test_windows_chronological(self, L, step, gaps):
        t, sess = 0, []
        for g in gaps:
            t += g
            sess.append(Session((0, 1), t, t + 50))
            t += 50
        for seq in build_sequences({"u": sess}, L, step).get("u", []):
            chain = seq.history + (seq.target,)
            assert len(seq.history) == L
            assert all(a.end_time <= b.start_time for a, b in zip(chain, chain[1:]))


class TestSplit:
    @pytest.mark.parametrize("n,expected", [(20, (5, 5, 10)), (3, (1, 1, 1)), (1, (1, 0, 0)), (2, (1, 0, 1)), (16, (1, 5, 10))])
    def test_counts(self, n, expected):
        assert eval_counts(n) == expected

    def test_partition(self):
        per_user = {
            u: build_sequences({u: sessions_at(n)}, L=3, step=1)[u] for u, n in [("a", 30), ("b", 8), ("c", 5)]
        }
        train, val, test = split_chronological(per_user)
        everything = [s for u in sorted(per_user) for s in per_user[u]]
        assert sorted(map(id, train + val + test)) == sorted(map(id, everything))
        assert len({id(s) for s in train} & {id(s) for s in val + test}) == 0
        # validation precedes test for every user
        for u in per_user:
            v = [s.target.start_time for s in val if s.user == u]
            t = [s.target.start_time for s in test if s.user == u]
            if v and t:
                assert max(v) < min(t)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 60), st.integers(0, 12), st.integers(0, 6))
    def test_train_floor(self, n, n_test, n_val):
        tr, va, te = eval_counts(n, n_test, n_val)
        assert tr + va + te == n
        assert min(tr, va, te) >= 0
        if n >= 1:
            assert tr >= 1


class TestCatalog:
    def test_distinct_users(self):
        cat = build_catalog([ev("u1", "a", 1), ev("u2", "a", 2), ev("u1", "b", 3)])
        assert cat.popularity[cat.index("a")] == 2
        assert cat.popularity[cat.index("b")] == 1

    def test_single(self):
        cat = build_catalog([ev("u", "x", 1)])
        assert len(cat) == 1 and cat.popularity.tolist() == [1]

    def test_distinct_vs_total(self):
        cat = build_catalog([ev("u", "a", t) for t in range(100)])
        assert cat.popularity.tolist() == [1]
        assert cat.listen_count.tolist() == [100]

    def test_lexicographic_bijection(self):
        events = [ev("u", s, i) for i, s in enumerate(["zz", "b", "a", "b"])]
        cat = build_catalog(events)
        assert cat.song_ids == ("a", "b", "zz")
        assert [cat.index(s) for s in cat.song_ids] == [0, 1, 2]
        assert build_catalog(list(reversed(events))).song_ids == cat.song_ids

    def test_empty(self):
        with pytest.raises(ValueError):
            build_catalog([])
