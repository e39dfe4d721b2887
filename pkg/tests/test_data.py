import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keystroke_siamese.data import (
    AALTO_COLUMNS,
    KeystrokeEvent,
    KeystrokeSequence,
    SyntheticSpec,
    UserCollection,
    generate_synthetic,
    parse_dataset,
    split_users,
    write_dataset,
)
from keystroke_siamese.errors import ConfigurationError, EmptyDatasetError, SchemaError, TooShortError
from keystroke_siamese.features import extract_features

HEADER = "user_id\tsession_id\tpress_time\trelease_time\tkeycode\n"


def _write(tmp_path, body, header=HEADER, name="log.tsv"):
    p = tmp_path / name
    p.write_text(header + body)
    return p


def _rows(user, session, n, start=1000, keycode=65):
    return "".join(f"{user}\t{session}\t{start + 200 * i}\t{start + 200 * i + 90}\t{keycode}\n" for i in range(n))


def test_parse_groups_users_and_sessions(tmp_path):
    body = "".join(_rows(u, f"s{s}", 4) for u in ("a", "b") for s in range(15))
    users = parse_dataset(_write(tmp_path, body))
    assert users.user_ids == ["a", "b"]
    assert all(len(users[u]) == 15 for u in users)
    assert users.rejected_rows == 0


def test_negative_hold_row_rejected(tmp_path):
    body = _rows("a", "s0", 3) + "a\ts0\t5000\t4990\t66\n" + _rows("b", "s0", 3)
    users = parse_dataset(_write(tmp_path, body))
    assert users.rejected_rows == 1
    assert users.rejections == {"negative_hold": 1}
    assert len(users["a"][0]) == 3


def test_keycode_out_of_range_rejected(tmp_path):
    body = _rows("a", "s0", 3) + "a\ts0\t5000\t5100\t300\n"
    users = parse_dataset(_write(tmp_path, body))
    assert users.rejections == {"keycode_range": 1}
    assert 300 not in users["a"][0].keycodes


def test_malformed_numbers_and_short_sessions_reported(tmp_path):
    body = _rows("a", "s0", 3) + "a\ts1\tnan?\t1\t65\n" + "a\ts2\t10\t20\t65\n" + "a\ts3\t1\n"
    users = parse_dataset(_write(tmp_path, body))
    assert users.rejections == {"bad_number": 1, "short_sequence": 1, "missing_field": 1}
    assert [s.session_id for s in users["a"]] == ["s0"]


def test_rows_sorted_by_press_time(tmp_path):
    body = "a\ts0\t300\t350\t66\na\ts0\t100\t150\t65\n"
    seq = parse_dataset(_write(tmp_path, body))["a"][0]
    assert list(seq.press) == [100.0, 300.0]
    assert list(seq.keycodes) == [65, 66]


def test_missing_column_is_schema_error(tmp_path):
    p = _write(tmp_path, "a\ts0\t1\t2\n", header="user_id\tsession_id\tpress_time\trelease_time\n")
    with pytest.raises(SchemaError):
        parse_dataset(p)


def test_no_valid_rows_is_empty_dataset(tmp_path):
    with pytest.raises(EmptyDatasetError):
        parse_dataset(_write(tmp_path, "a\ts0\t5\t1\t65\n"))


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError):
        parse_dataset(tmp_path / "nope.tsv")


def test_custom_column_map_and_directory(tmp_path):
    header = "\t".join(AALTO_COLUMNS[c] for c in ("user_id", "session_id", "press_time", "release_time", "keycode"))
    d = tmp_path / "files"
    d.mkdir()
    (d / "1_keystrokes.txt").write_text(header + "\n" + _rows("1", "10", 3))
    (d / "2_keystrokes.txt").write_text(header + "\n" + _rows("2", "20", 3))
    users = parse_dataset(d, AALTO_COLUMNS)
    assert users.user_ids == ["1", "2"]


def test_decimal_timestamps(tmp_path):
    seq = parse_dataset(_write(tmp_path, "a\ts0\t10.5\t20.25\t65\na\ts0\t30\t40\t66\n"))["a"][0]
    assert seq.press[0] == 10.5 and seq.release[0] == 20.25


def test_sequence_invariants():
    with pytest.raises(TooShortError):
        KeystrokeSequence("u", "s", [65], [0.0], [1.0])
    with pytest.raises(ValueError):
        KeystrokeSequence("u", "s", [65, 66], [0.0, 10.0], [5.0, 9.0])
    with pytest.raises(ValueError):
        KeystrokeEvent(256, 0.0, 1.0)
    seq = KeystrokeSequence.from_events("u", "s", [KeystrokeEvent(65, 0, 5), KeystrokeEvent(66, 10, 20)])
    assert seq.events[1] == KeystrokeEvent(66, 10.0, 20.0)
    with pytest.raises(ValueError):
        seq.press[0] = 3.0


def test_round_trip(tmp_path):
    users = generate_synthetic(SyntheticSpec(num_users=4, sequences_per_user=3, seed=5))
    p = tmp_path / "rt.tsv"
    write_dataset(users, p)
    assert parse_dataset(p) == users


def test_round_trip_decimal_times(tmp_path):
    seq = KeystrokeSequence("x", "1", [1, 200], [0.1, 1234.5678901234], [0.30000000000000004, 1300.0])
    users = UserCollection({"x": [seq]})
    write_dataset(users, tmp_path / "d.tsv")
    assert parse_dataset(tmp_path / "d.tsv") == users


def test_synthetic_deterministic(tmp_path):
    spec = SyntheticSpec(num_users=5, sequences_per_user=4, seed=1)
    write_dataset(generate_synthetic(spec), tmp_path / "a.tsv")
    write_dataset(generate_synthetic(spec), tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_synthetic_cardinality():
    users = generate_synthetic(SyntheticSpec(num_users=100, sequences_per_user=15, keys_per_sequence=(50, 80), seed=2))
    assert len(users) == 100
    assert users.num_sequences == 1500
    lengths = [len(s) for s in users.sequences()]
    assert min(lengths) >= 50 and max(lengths) <= 80


def test_zero_noise_gives_identical_latency_pattern():
    users = generate_synthetic(SyntheticSpec(num_users=3, sequences_per_user=5, noise_scale=0.0, fixed_text=True, seed=4))
    for u in users:
        feats = [extract_features(s).rows for s in users[u]]
        for f in feats[1:]:
            np.testing.assert_array_equal(f, feats[0])


def test_zero_noise_free_text_depends_only_on_keys():
    users = generate_synthetic(SyntheticSpec(num_users=2, sequences_per_user=6, noise_scale=0.0, seed=9))
    for u in users:
        holds = {}
        for s in users[u]:
            for k, h in zip(s.keycodes, s.release - s.press):
                assert holds.setdefault(int(k), h) == h


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SyntheticSpec(num_users=0)
    with pytest.raises(ConfigurationError):
        SyntheticSpec(keys_per_sequence=(30, 20))
    with pytest.raises(ConfigurationError):
        SyntheticSpec(hold_mean_ms=0)


def _intra_user_variance(users):
    out = []
    for u in users:
        m = np.array([extract_features(s).rows[:-1, :4].mean(axis=0) for s in users[u]])
        out.append(m.var(axis=0).sum())
    return float(np.mean(out))


def test_less_noise_never_more_intra_user_variance():
    for seed in range(30):
        lo = _intra_user_variance(generate_synthetic(SyntheticSpec(num_users=5, sequences_per_user=6, noise_scale=0.1, seed=seed)))
        hi = _intra_user_variance(generate_synthetic(SyntheticSpec(num_users=5, sequences_per_user=6, noise_scale=0.4, seed=seed)))
        assert lo <= hi


def test_split_partition_counts():
    users = generate_synthetic(SyntheticSpec(num_users=10, sequences_per_user=2, keys_per_sequence=(5, 6)))
    train, test = split_users(users, 0.5, seed=0)
    assert len(train) == len(test) == 5
    assert not set(train) & set(test)
    assert split_users(users, 0.5, seed=0) == (train, test)


def test_split_mirrors_training_ratio():
    users = UserCollection({f"u{i}": [KeystrokeSequence(f"u{i}", "s", [1, 2], [0, 1], [0, 1])] for i in range(168)})
    train, test = split_users(users, 68 / 168, seed=3)
    assert (len(train), len(test)) == (68, 100)


def test_split_fraction_validated():
    users = generate_synthetic(SyntheticSpec(num_users=4, sequences_per_user=2, keys_per_sequence=(5, 6)))
    for bad in (0, 1, 1.5, -0.1):
        with pytest.raises(ConfigurationError):
            split_users(users, bad, seed=0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 40), frac=st.floats(0.05, 0.95), seed=st.integers(0, 2**32))
def test_split_is_partition(n, frac, seed):
    users = UserCollection({f"u{i}": [KeystrokeSequence(f"u{i}", "s", [1, 2], [0, 1], [0, 1])] for i in range(n)})
    train, test = split_users(users, frac, seed)
    assert set(train) & set(test) == set()
    assert set(train) | set(test) == set(users)
