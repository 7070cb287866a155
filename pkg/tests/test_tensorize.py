import os

import numpy as np
import pytest

from graphcaps.data import PAD, Graph, permute_node_ids
from graphcaps.labelling import Procedure, rank_nodes
from graphcaps.tensor_cache import CacheError, cache_filename, load_tensors, save_tensors
from graphcaps.tensorize import (
    _node_keys,
    assemble_neighbourhood,
    default_width,
    graph_to_tensor,
    node_sequence,
    normalize_receptive_field,
    padded_anchor_count,
    tensorize_dataset,
)
from helpers import path_graph, random_graph, star_graph, triangle, write_tu_files

from graphcaps.data import load_tu_dataset


class TestNodeSequence:
    def test_small_graph_pads(self):
        g = triangle()
        ranking = rank_nodes(g, Procedure.CANONICAL)
        seq = node_sequence(g, w=5, ranking=ranking)
        assert len(seq) == 5
        assert sorted(seq[:3]) == [0, 1, 2]
        assert seq[3:] == [PAD, PAD]

    def test_large_graph_truncates_to_top_ranked(self):
        rng = np.random.default_rng(0)
        g = random_graph(rng, 28, 0.2, connected=True)
        ranking = rank_nodes(g, Procedure.BETWEENNESS)
        seq = node_sequence(g, w=18, ranking=ranking)
        assert seq == [int(v) for v in ranking.order[:18]]


class TestNeighbourhoodAssembly:
    def test_isolated_node(self):
        g = Graph(n=3, edges=frozenset({(1, 2)}), node_labels=(0, 0, 0), class_label=0)
        assert assemble_neighbourhood(g, anchor=0, k=4) == [(0, 0)]

    def test_star_ring_overshoot(self):
        got = assemble_neighbourhood(star_graph(4), anchor=0, k=3)
        assert got[0] == (0, 0)
        assert sorted(got[1:]) == [(1, 1), (2, 1), (3, 1), (4, 1)]

    def test_path_end_anchor_hand_trace(self):
        # BFS from node 0 of a 10-path reaches 0,1,2,3 within 3 hops
        got = assemble_neighbourhood(path_graph(10), anchor=0, k=4)
        assert got == [(0, 0), (1, 1), (2, 2), (3, 3)]


class TestNormalization:
    def test_pad_tail_when_few_candidates(self):
        g = path_graph(2)
        keys = _node_keys(g, Procedure.CANONICAL, naive_ties=False)
        field = normalize_receptive_field([(0, 0), (1, 1)], keys, k=4)
        assert field.members == (0, 1, PAD, PAD)

    def test_anchor_always_first(self):
        g = star_graph(4)
        keys = _node_keys(g, Procedure.CANONICAL, naive_ties=False)
        candidates = assemble_neighbourhood(g, anchor=0, k=3)
        field = normalize_receptive_field(candidates, keys, k=3)
        assert field.members[0] == 0
        assert field.anchor == 0

    def test_star_selection_consistent_across_relabellings(self):
        # leaves are interchangeable: whichever two survive the k-cut, the
        # label content of the field must be identical for every relabelling
        g = Graph(n=5, edges=frozenset({(0, 1), (0, 2), (0, 3), (0, 4)}),
                  node_labels=(1, 0, 0, 2, 2), class_label=0)
        ref = None
        for seed in range(8):
            h = permute_node_ids(g, seed)
            keys = _node_keys(h, Procedure.CANONICAL, naive_ties=False)
            anchor = [v for v in range(5) if len(h.adjacency()[v]) == 4][0]
            field = normalize_receptive_field(
                assemble_neighbourhood(h, anchor, k=3), keys, k=3
            )
            labels = tuple(h.node_labels[m] for m in field.members)
            if ref is None:
                ref = labels
            assert labels == ref


class TestGraphToTensor:
    def test_shape_and_fibers(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            g = random_graph(rng, int(rng.integers(1, 25)), 0.3, num_labels=7)
            t = graph_to_tensor(g, w=18, k=10, d=7, procedure=Procedure.BETWEENNESS)
            assert t.data.shape == (18, 10, 8)
            assert np.array_equal(t.data.sum(axis=2), np.ones((18, 10)))

    def test_pad_anchor_rows_are_padding_channel(self):
        t = graph_to_tensor(triangle(), w=5, k=4, d=2, procedure=Procedure.CANONICAL)
        for row in (3, 4):
            assert np.array_equal(t.data[row, :, 2], np.ones(4))
            assert np.array_equal(t.data[row, :, :2], np.zeros((4, 2)))

    @pytest.mark.parametrize("procedure", [Procedure.CANONICAL, Procedure.BETWEENNESS])
    def test_bitwise_permutation_invariance(self, procedure):
        rng = np.random.default_rng(2)
        for trial in range(30):
            g = random_graph(rng, int(rng.integers(2, 21)), float(rng.uniform(0.1, 0.8)),
                             num_labels=5)
            ref = graph_to_tensor(g, w=10, k=6, d=5, procedure=procedure).data
            for rep in range(3):
                h = permute_node_ids(g, [trial, rep])
                got = graph_to_tensor(h, w=10, k=6, d=5, procedure=procedure).data
                assert np.array_equal(ref, got)

    def test_naive_ties_can_break_invariance(self):
        # the fidelity flag intentionally depends on input numbering; on a
        # symmetric labelled star some relabelling changes the tensor
        g = Graph(n=5, edges=frozenset({(0, 1), (0, 2), (0, 3), (0, 4)}),
                  node_labels=(0, 0, 1, 0, 1), class_label=0)
        ref = graph_to_tensor(g, w=3, k=3, d=2, procedure=Procedure.BETWEENNESS,
                              naive_ties=True).data
        seen_different = any(
            not np.array_equal(
                ref,
                graph_to_tensor(
                    permute_node_ids(g, seed), w=3, k=3, d=2,
                    procedure=Procedure.BETWEENNESS, naive_ties=True,
                ).data,
            )
            for seed in range(20)
        )
        assert seen_different


class TestDatasetTensorization:
    def test_default_width_is_rounded_average(self, tu_dir):
        graphs = [path_graph(4), path_graph(5), triangle()]
        write_tu_files(tu_dir, "WIDTH", graphs)
        ds = load_tu_dataset(tu_dir, "WIDTH")
        assert default_width(ds) == 4  # mean(4, 5, 3) = 4
        assert padded_anchor_count(ds, 4) == 1

    def test_parallel_extraction_matches_serial(self, tu_dir):
        graphs = [random_graph(np.random.default_rng(i), 8, 0.4, num_labels=3)
                  for i in range(12)]
        write_tu_files(tu_dir, "PAR", graphs)
        ds = load_tu_dataset(tu_dir, "PAR")
        serial = tensorize_dataset(ds, w=6, k=4, jobs=1)
        parallel = tensorize_dataset(ds, w=6, k=4, jobs=2)
        for a, b in zip(serial, parallel):
            assert a.graph_index == b.graph_index
            assert np.array_equal(a.data, b.data)


class TestCacheFormat:
    def _tensors(self):
        rng = np.random.default_rng(4)
        graphs = [random_graph(rng, 6, 0.5, num_labels=2) for _ in range(5)]
        return [
            graph_to_tensor(g, w=4, k=3, d=2, procedure=Procedure.CANONICAL, graph_index=i)
            for i, g in enumerate(graphs)
        ]

    def test_roundtrip(self, tmp_path):
        tensors = self._tensors()
        path = str(tmp_path / cache_filename("X", Procedure.CANONICAL, 4, 3, 7, False))
        save_tensors(path, tensors, w=4, k=3, d=2, procedure=Procedure.CANONICAL, seed=7)
        loaded = load_tensors(path)
        assert loaded["w"] == 4 and loaded["k"] == 3 and loaded["d"] == 2
        assert loaded["procedure"] is Procedure.CANONICAL
        assert loaded["seed"] == 7
        assert not loaded["naive_ties"]
        for a, b in zip(tensors, loaded["tensors"]):
            # one-hot values survive the float32 cache exactly
            assert np.array_equal(a.data, b.data)
            assert a.class_label == b.class_label

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bad.gct")
        with open(path, "wb") as fh:
            fh.write(b"NOTATENSORCACHE" * 4)
        with pytest.raises(CacheError, match="magic"):
            load_tensors(path)

    def test_truncation_rejected(self, tmp_path):
        tensors = self._tensors()
        path = str(tmp_path / "trunc.gct")
        save_tensors(path, tensors, w=4, k=3, d=2, procedure=Procedure.CANONICAL, seed=None)
        blob = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(blob[:-10])
        with pytest.raises(CacheError, match="truncated"):
            load_tensors(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CacheError, match="not found"):
            load_tensors(str(tmp_path / "absent.gct"))

    def test_documented_byte_layout(self, tmp_path):
        # independent reader following the documented offsets
        import struct

        tensors = self._tensors()
        path = str(tmp_path / "layout.gct")
        save_tensors(path, tensors, w=4, k=3, d=2, procedure=Procedure.BETWEENNESS,
                     seed=42, naive_ties=True)
        blob = open(path, "rb").read()
        assert blob[:8] == b"GCTENSR\x00"
        version, w, k, d, count = struct.unpack_from("<IIIII", blob, 8)
        proc, flags = struct.unpack_from("<BB", blob, 28)
        (seed,) = struct.unpack_from("<q", blob, 32)
        assert (version, w, k, d, count) == (1, 4, 3, 2, 5)
        assert proc == 0 and flags == 1 and seed == 42
        (first_label,) = struct.unpack_from("<i", blob, 40)
        assert first_label == tensors[0].class_label
        values = np.frombuffer(blob, dtype="<f4", count=4 * 3 * 3, offset=44)
        assert np.array_equal(values.reshape(4, 3, 3).astype(np.float64), tensors[0].data)
