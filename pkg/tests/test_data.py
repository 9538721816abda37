import numpy as np
import pytest
import tomli
import tomli_w
from hypothesis import given, settings
from hypothesis import strategies as st

from dens import data
from dens.data import (GeneratorConfig, LJParams, ParseError, Structure, collate, generate_dataset,
                       lj_energy_forces, load_dataset, make_batches, read_frames, relax, sha256_file, write_frames)

from conftest import SMALL


@pytest.mark.parametrize("a,b,eps,sig", [(1, 1, 1.0, 1.0), (1, 2, 1.5, 0.8), (2, 2, 0.5, 0.88)])
def test_dimer_minimum_and_zero_crossing(a, b, eps, sig):
    rmin = 2 ** (1 / 6) * sig
    e, f = lj_energy_forces([a, b], [[0, 0, 0], [rmin, 0, 0]])
    assert abs(e + eps) < 1e-14
    assert np.abs(f).max() < 1e-12
    e0, f0 = lj_energy_forces([a, b], [[0, 0, 0], [0, sig, 0]])
    assert abs(e0) < 1e-14
    # repulsive at r = sigma: atom 1 pushed along +y
    assert abs(f0[1, 1] - 24 * eps / sig) < 1e-12 and abs(f0[0, 1] + 24 * eps / sig) < 1e-12


def test_lj_rejects_overlap():
    with pytest.raises(ValueError, match="closer"):
        lj_energy_forces([1, 1], [[0, 0, 0], [0, 0, 0]])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_lj_forces_are_negative_gradient(seed):
    rng = np.random.default_rng(seed)
    n = 5
    pos = rng.uniform(0, 2.0, size=(n, 3))
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1) + np.eye(n) * 10
    if d.min() < 0.7:
        return
    species = rng.integers(1, 3, size=n)
    _, f = lj_energy_forces(species, pos)
    h = 1e-6
    for i in range(n):
        for c in range(3):
            p = pos.copy()
            p[i, c] += h
            ep, _ = lj_energy_forces(species, p)
            p[i, c] -= 2 * h
            em, _ = lj_energy_forces(species, p)
            assert abs(-(ep - em) / (2 * h) - f[i, c]) < 1e-5 * max(1.0, abs(f[i, c]))
    assert np.abs(f.sum(0)).max() < 1e-10


def test_relax_monotone_and_converged():
    rng = np.random.default_rng(3)
    cfg = GeneratorConfig()
    z, p = data._place(rng, 7, cfg, LJParams())
    frames = relax(z, p)
    e = [s.energy for s in frames]
    assert all(b <= a for a, b in zip(e, e[1:]))
    assert np.linalg.norm(frames[-1].forces, axis=1).max() <= cfg.f_max_stop
    assert frames[0].frame == 0
    assert all(s.frame % cfg.stride == 0 for s in frames[:-1])


def test_relax_reports_non_convergence():
    with pytest.raises(data.RelaxationFailed):
        relax([1, 2, 1], [[0, 0, 0], [0.9, 0, 0], [0, 1.1, 0.2]], max_steps=3)


def test_frames_roundtrip_exact(tmp_path, rng):
    s = Structure(np.array([1, 2, 2]), rng.normal(size=(3, 3)), float(rng.normal()) * 1e-3,
                  rng.normal(size=(3, 3)) * 1e5, np.array([True, False, True]), 4, 60)
    path = tmp_path / "x.xyz"
    write_frames(path, [s, s])
    back = read_frames(path)
    assert len(back) == 2
    for b in back:
        np.testing.assert_array_equal(b.positions, s.positions)
        np.testing.assert_array_equal(b.forces, s.forces)
        np.testing.assert_array_equal(b.free, s.free)
        assert b.energy == s.energy and (b.trajectory, b.frame) == (4, 60)


@pytest.mark.parametrize("mutate,lineno,msg", [
    (lambda ls: ls.__setitem__(0, "three"), 1, "atom count"),
    (lambda ls: ls.__setitem__(3, ls[3].replace("T", "maybe")), 4, "free flag"),
    (lambda ls: ls.__setitem__(2, ls[2] + " 1.0"), 3, "columns"),
    (lambda ls: ls.__setitem__(4, ls[4].replace(ls[4].split()[1], "nan")), 5, "non-finite"),
    (lambda ls: ls.__setitem__(1, ls[1].replace("energy=", "e=")), 2, "energy"),
    (lambda ls: ls.pop(), 5, "expected 3 atom lines"),
])
def test_parse_errors_carry_line_numbers(tmp_path, mutate, lineno, msg):
    s = Structure(np.array([1, 1, 2]), np.eye(3), -1.0, np.zeros((3, 3)), np.ones(3, dtype=bool))
    path = tmp_path / "bad.xyz"
    write_frames(path, [s])
    lines = path.read_text().splitlines()
    mutate(lines)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match=msg) as info:
        read_frames(path)
    assert info.value.line == lineno


def test_dataset_layout(small_dataset_dir, small_dataset):
    m = small_dataset.manifest
    assert m["format_version"] == data.FORMAT_VERSION
    assert set(small_dataset.splits) == {"train", "val", "test"}
    trajs = [t for name in m["splits"] for t in m["splits"][name]]
    assert sorted(trajs) == list(range(SMALL.n_trajectories))
    for name, info in m["files"].items():
        assert info["sha256"] == sha256_file(small_dataset_dir / info["path"])
        assert len(small_dataset.splits[name]) == info["frames"]
        assert {s.trajectory for s in small_dataset.splits[name]} == set(m["splits"][name])
    assert data.max_label_error(small_dataset) < 1e-10


def test_unknown_split_lists_valid(small_dataset):
    with pytest.raises(KeyError, match="train, val, test"):
        small_dataset.split("holdout")


def test_regeneration_byte_identical(tmp_path, small_dataset_dir):
    generate_dataset(tmp_path, SMALL, threads=2)
    for name in ("train.xyz", "val.xyz", "test.xyz", "manifest.toml"):
        assert (tmp_path / name).read_bytes() == (small_dataset_dir / name).read_bytes()


def test_different_seed_differs(tmp_path, small_dataset_dir):
    generate_dataset(tmp_path, GeneratorConfig(n_train=8, n_val=3, n_test=3, seed=8), threads=1)
    assert (tmp_path / "train.xyz").read_bytes() != (small_dataset_dir / "train.xyz").read_bytes()


def test_overlapping_splits_rejected(tmp_path, small_dataset_dir):
    m = tomli.loads((small_dataset_dir / "manifest.toml").read_text())
    m["splits"]["val"].append(m["splits"]["train"][0])
    (tmp_path / "manifest.toml").write_text(tomli_w.dumps(m))
    with pytest.raises(ValueError, match="both"):
        data.read_manifest(tmp_path / "manifest.toml")


def test_threads_env(monkeypatch):
    monkeypatch.setenv("DENS_THREADS", "3")
    assert data.num_threads() == 3


def test_batches_cover_split_once(small_dataset, rng):
    frames = small_dataset.split("train")
    seen = []
    for b in make_batches(frames, 5, rng):
        assert b.num_graphs <= 5
        assert len(b.segment) == b.num_atoms == b.counts.sum()
        for j, sl in enumerate(b.atom_slices()):
            np.testing.assert_array_equal(b.positions[sl], frames[b.ids[j]].positions)
        seen += b.ids.tolist()
    assert sorted(seen) == list(range(len(frames)))


def test_collate_segments():
    s = [Structure(np.array([1] * n), np.zeros((n, 3)), 0.0, np.zeros((n, 3)), np.ones(n, dtype=bool))
         for n in (2, 3)]
    b = collate(s, [7, 9])
    np.testing.assert_array_equal(b.segment, [0, 0, 1, 1, 1])
    np.testing.assert_array_equal(b.ids, [7, 9])
