import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import arrow_instance, laplacian_2d, nonsym_dd_instance, path_graph, spd_instance
from ipmsolve.decomp import assemble_schur, nested_dissection_bbd, partition_rows
from ipmsolve.factor import SchurFactor, schur_partial_factor
from ipmsolve.sparse import SparseMatrix


def block_diagonal(sizes, rng):
    n = sum(sizes)
    D = np.zeros((n, n))
    lo = 0
    for sz in sizes:
        D[lo : lo + sz, lo : lo + sz] = rng.uniform(-1, 1, (sz, sz)) + sz * np.eye(sz)
        lo += sz
    return SparseMatrix.from_dense(D)


def assert_valid_bbd(A, S):
    Ap = A.permute(S.perm, S.perm)
    np.testing.assert_array_equal(S.reassemble().to_dense(), Ap.to_dense())
    blk = S.block_of()
    r, c = blk[Ap.row_ids], blk[Ap.col_indices]
    cross = (r != c) & (r < S.nblocks) & (c < S.nblocks)
    assert not np.any(cross)
    assert sorted(S.perm.tolist()) == list(range(A.nrows))


class TestPartitionRows:
    def test_ranges(self):
        P = partition_rows(SparseMatrix.identity(4), 2)
        assert P.row_ranges == ((0, 2), (2, 4))

    def test_sizes_balanced(self):
        P = partition_rows(SparseMatrix.identity(11), 4)
        sizes = [hi - lo for lo, hi in P.row_ranges]
        assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 11

    def test_block_diagonal_has_no_ghosts(self):
        A = block_diagonal([3, 3, 3], np.random.default_rng(0))
        P = partition_rows(A, 3)
        assert all(O.nnz == 0 for O in P.offdiag_blocks)
        assert all(len(g) == 0 for g in P.ghost_maps)

    @pytest.mark.parametrize("nranks", [1, 2, 3, 5])
    def test_reassembly(self, nranks):
        rng = np.random.default_rng(nranks)
        D = rng.standard_normal((20, 20)) * (rng.random((20, 20)) < 0.25)
        A = SparseMatrix.from_dense(D)
        P = partition_rows(A, nranks)
        np.testing.assert_array_equal(P.reassemble().to_dense(), D)
        for r, (lo, hi) in enumerate(P.row_ranges):
            cols = A.col_indices[A.row_offsets[lo] : A.row_offsets[hi]]
            remote = sorted(set(cols[(cols < lo) | (cols >= hi)].tolist()))
            assert [g for _, g in P.ghost_maps[r]] == remote
            assert all(P.owner(g) == o for o, g in P.ghost_maps[r])

    def test_too_many_ranks(self):
        with pytest.raises(ValueError):
            partition_rows(SparseMatrix.identity(3), 4)


class TestNestedDissection:
    def test_path_graph(self):
        S = nested_dissection_bbd(path_graph(7), 2)
        assert S.interface_size == 1
        assert [hi - lo for lo, hi in S.block_ranges] == [3, 3]
        assert S.perm[-1] == 3
        assert_valid_bbd(path_graph(7), S)

    def test_block_diagonal_has_empty_interface(self):
        A = block_diagonal([4, 3, 5], np.random.default_rng(1))
        S = nested_dissection_bbd(A, 3)
        assert S.interface_size == 0
        assert_valid_bbd(A, S)

    @given(st.integers(0, 10_000), st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_random_validity(self, seed, nblocks):
        rng = np.random.default_rng(seed)
        A = SparseMatrix.from_dense((rng.random((50, 50)) < 0.05) * rng.standard_normal((50, 50)) + np.eye(50))
        assert_valid_bbd(A, nested_dissection_bbd(A, nblocks))

    @pytest.mark.parametrize("nblocks", [2, 3, 4, 7])
    def test_balance_on_connected_grid(self, nblocks):
        A = laplacian_2d(12)
        S = nested_dissection_bbd(A, nblocks)
        assert_valid_bbd(A, S)
        target = A.nrows / nblocks
        for lo, hi in S.block_ranges:
            assert target / 2 <= hi - lo <= 2 * target

    def test_deterministic(self):
        A = nonsym_dd_instance(np.random.default_rng(3), 40, 0.08)
        s1, s2 = nested_dissection_bbd(A, 4), nested_dissection_bbd(A, 4)
        np.testing.assert_array_equal(s1.perm, s2.perm)
        assert s1.block_ranges == s2.block_ranges

    def test_too_many_blocks(self):
        with pytest.raises(ValueError):
            nested_dissection_bbd(SparseMatrix.identity(3), 4)

    def test_dump(self, tmp_path):
        S = nested_dissection_bbd(path_graph(7), 2)
        S.dump(tmp_path / "bbd.txt")
        lines = (tmp_path / "bbd.txt").read_text().splitlines()
        assert lines[0].startswith("perm ") and lines[-1] == "interface 6 7"


class TestAssembleSchur:
    def test_zero_contribs(self):
        A = spd_instance(np.random.default_rng(2), 20, 0.2)
        S = nested_dissection_bbd(A, 2)
        ns = S.interface_size
        zero = SparseMatrix.from_dense(np.zeros((ns, ns)), keep_zeros=True)
        contribs = [SchurFactor(None, None, None, zero) for _ in range(S.nblocks)]
        np.testing.assert_array_equal(assemble_schur(S, contribs).to_dense(), S.interface_block.to_dense())

    def test_scalar_example(self):
        A = SparseMatrix.from_dense(np.array([[2.0, 1.0], [1.0, 3.0]]))
        from ipmsolve.decomp import bbd_from_perm

        S = bbd_from_perm(A, [0, 1], [1])
        sf = schur_partial_factor(S.diag_blocks[0], S.border_cols[0], S.border_rows[0])
        assert assemble_schur(S, [sf]).to_dense()[0, 0] == pytest.approx(2.5)

    @pytest.mark.parametrize("seed", range(4))
    def test_arrow_matches_dense_schur(self, seed):
        rng = np.random.default_rng(seed)
        A = arrow_instance(rng, 12, 3, iface=3)
        S = nested_dissection_bbd(A, 3)
        contribs = [schur_partial_factor(S.diag_blocks[b], S.border_cols[b], S.border_rows[b]) for b in range(3)]
        got = assemble_schur(S, contribs).to_dense()
        Dp = A.permute(S.perm, S.perm).to_dense()
        s0 = S.interface_range[0]
        ref = Dp[s0:, s0:] - Dp[s0:, :s0] @ np.linalg.solve(Dp[:s0, :s0], Dp[:s0, s0:])
        assert np.linalg.norm(got - ref) <= 1e-12 * max(np.linalg.norm(ref), 1.0)

    def test_symmetric_input_gives_symmetric_output(self):
        A = spd_instance(np.random.default_rng(8), 30, 0.15)
        S = nested_dissection_bbd(A, 3)
        contribs = [schur_partial_factor(S.diag_blocks[b], S.border_cols[b], S.border_rows[b]) for b in range(3)]
        out = assemble_schur(S, contribs)
        assert out.symmetry == "symmetric"

    def test_count_mismatch(self):
        S = nested_dissection_bbd(path_graph(7), 2)
        with pytest.raises(ValueError):
            assemble_schur(S, [])
