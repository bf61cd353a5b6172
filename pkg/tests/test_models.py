import numpy as np
import pytest

from bachlstm.dataset import BatchStream, WindowConfig, make_duration_windows, make_note_windows
from bachlstm.models import (Checkpoint, CheckpointVersionError, CorruptCheckpointError,
                             DictionaryMismatchError, ModelSpec, TrainConfig, TrainHistory,
                             TrainingError, EpochRecord, build_duration_model, build_network,
                             build_note_model, checkpoint_bytes, load_checkpoint,
                             save_checkpoint, train)

from conftest import toy_songs

SCALE = 1 / 16


def note_stream(seed=0, n=8, batch=16, length=32):
    songs = toy_songs(seed, length=length)
    ws = make_note_windows(songs, WindowConfig(n), n_notes=11)
    return BatchStream(ws, WindowConfig(n, batch, shuffle_seed=seed))


class TestSpecs:
    def test_note_model_layers(self):
        spec = build_note_model(130)
        assert [l.kind for l in spec.layers] == [
            "lstm", "dropout", "bidirectional_lstm", "dropout", "batchnorm", "dense", "softmax"]
        assert spec.layers[0].width == 512 and spec.layers[0].returns_sequence
        assert spec.layers[2].width == 256
        assert spec.layers[5].width == 130
        assert [l.keep_prob for l in spec.layers if l.kind == "dropout"] == [0.7, 0.7]

    def test_duration_model_layers(self):
        spec = build_duration_model(130)
        assert [l.kind for l in spec.layers] == ["lstm", "lstm", "dropout", "dense", "softmax"]
        assert spec.input_dim == 133 and spec.output_dim == 3
        assert spec.layers[0].returns_sequence and not spec.layers[1].returns_sequence
        assert all(l.kind != "bidirectional_lstm" for l in spec.layers)

    def test_scale(self):
        spec = build_note_model(12, scale=SCALE)
        assert (spec.layers[0].width, spec.layers[2].width) == (32, 16)
        net = build_network(spec)
        assert net.layers[5].params["W"].shape == (32, 12)

    def test_full_size_shapes(self):
        net = build_network(build_note_model(130))
        p = net.parameters()
        assert p["0.W"].shape == (130, 2048) and p["2.fwd.U"].shape == (256, 1024)
        assert p["5.W"].shape == (512, 130)

    def test_small_vocab_rejected(self):
        with pytest.raises(ValueError):
            build_note_model(1)

    def test_spec_round_trip(self):
        spec = build_duration_model(20, scale=0.25)
        assert ModelSpec.from_dict(spec.to_dict()) == spec
        assert spec.digest() != build_duration_model(21, scale=0.25).digest()

    def test_same_seed_same_weights(self):
        spec = build_note_model(9, scale=SCALE)
        a, b = build_network(spec, 5), build_network(spec, 5)
        assert all((a.parameters()[k] == v).all() for k, v in b.parameters().items())
        c = build_network(spec, 6)
        assert any((c.parameters()[k] != v).any() for k, v in b.parameters().items())


class TestTrain:
    def test_zero_epochs_keeps_initialization(self):
        spec = build_note_model(11, scale=SCALE)
        trained = train(spec, note_stream(), TrainConfig(epochs=0, seed=3))
        init = build_network(spec, 3)
        assert len(trained.history) == 0
        assert all((trained.network.parameters()[k] == v).all()
                    for k, v in init.parameters().items())

    def test_deterministic(self):
        spec = build_note_model(11, scale=SCALE)
        cfg = TrainConfig(epochs=3, seed=1)
        a = train(spec, note_stream(), cfg)
        b = train(spec, note_stream(), cfg)
        assert a.history.metrics() == b.history.metrics()
        assert all((a.network.parameters()[k] == v).all()
                   for k, v in b.network.parameters().items())

    def test_accuracy_matches_recount(self):
        spec = build_note_model(11, scale=SCALE)
        seen = {}

        def record(epoch, index, probs, y):
            hits = sum(int(np.argmax(p) == np.argmax(t)) for p, t in zip(probs, y))
            c, r = seen.get(epoch, (0, 0))
            seen[epoch] = (c + hits, r + len(y))

        hist = train(spec, note_stream(), TrainConfig(epochs=2), on_batch=record).history
        for rec in hist.records:
            assert (rec.correct, rec.rows) == seen[rec.epoch]
            assert rec.accuracy == seen[rec.epoch][0] / seen[rec.epoch][1]
            assert rec.rows == 2 * (33 - 8)

    def test_resume_matches_single_run(self):
        spec = build_note_model(11, scale=SCALE)
        full = train(spec, note_stream(), TrainConfig(epochs=4, patience=None))
        first = train(spec, note_stream(), TrainConfig(epochs=2, patience=None))
        rest = train(spec, note_stream(), TrainConfig(epochs=2, patience=None),
                     network=first.network, optimizer=first.optimizer, start_epoch=2)
        assert full.history.metrics()[2:] == rest.history.metrics()

    def test_early_stopping(self, monkeypatch):
        spec = build_note_model(11, scale=SCALE)
        monkeypatch.setattr("bachlstm.tensor_nn.Network.loss",
                            lambda self, x, y, train=True, backward=True:
                            (1.0, np.full(y.shape, 1 / y.shape[1])))
        monkeypatch.setattr("bachlstm.tensor_nn.Network.gradients",
                            lambda self: {k: np.zeros_like(v) for k, v in self.parameters().items()})
        hist = train(spec, note_stream(), TrainConfig(epochs=50, patience=3)).history
        assert len(hist) == 4

    def test_non_finite_loss_names_batch(self, monkeypatch):
        spec = build_note_model(11, scale=SCALE)
        monkeypatch.setattr("bachlstm.tensor_nn.Network.loss",
                            lambda self, x, y, train=True, backward=True: (float("nan"), y))
        with pytest.raises(TrainingError, match="epoch 1, batch 0"):
            train(spec, note_stream(), TrainConfig(epochs=1))

    def test_duration_model_trains(self):
        songs = toy_songs(2)
        ws = make_duration_windows(songs, WindowConfig(4), n_notes=11)
        spec = build_duration_model(11, scale=SCALE)
        hist = train(spec, BatchStream(ws, WindowConfig(4, 32)), TrainConfig(epochs=3)).history
        assert len(hist) == 3 and np.isfinite(hist.losses).all()

    def test_history_guards(self):
        h = TrainHistory()
        h.append(EpochRecord(1, 2.0, 0.5, 0.1))
        with pytest.raises(ValueError):
            h.append(EpochRecord(1, 1.0, 0.5, 0.1))
        with pytest.raises(ValueError):
            h.append(EpochRecord(2, 1.0, 1.5, 0.1))
        assert h.to_tsv().splitlines()[0] == "epoch\tloss\taccuracy\tseconds"


class TestCheckpoint:
    def trained(self):
        spec = build_note_model(11, scale=SCALE)
        t = train(spec, note_stream(), TrainConfig(epochs=1, seed=4))
        return Checkpoint(spec, t.network, t.optimizer, "abc123", 1, 4, {"kind": "note"})

    def test_save_load_save_identical(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, self.trained())
        loaded = load_checkpoint(path, "abc123")
        save_checkpoint(tmp_path / "b.ckpt", loaded)
        assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (loaded.epoch, loaded.seed, loaded.metadata) == (1, 4, {"kind": "note"})

    def test_loaded_model_predicts_like_rounded_original(self, tmp_path):
        ckpt = self.trained()
        save_checkpoint(tmp_path / "a.ckpt", ckpt)
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        for k, v in ckpt.network.parameters().items():
            v[...] = v.astype(np.float32)
        for layer in ckpt.network.layers:
            for k, v in layer.state.items():
                layer.state[k] = v.astype(np.float32).astype(np.float64)
        x = np.eye(11)[np.random.default_rng(0).integers(0, 11, (3, 8))]
        np.testing.assert_array_equal(loaded.network.predict(x), ckpt.network.predict(x))

    def test_wrong_dictionary(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", self.trained())
        with pytest.raises(DictionaryMismatchError):
            load_checkpoint(tmp_path / "a.ckpt", "other")

    def test_version_mismatch(self, tmp_path):
        data = bytearray(checkpoint_bytes(self.trained()))
        data[8] = 9
        (tmp_path / "a.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "a.ckpt")

    @pytest.mark.parametrize("damage", ["flip", "truncate", "magic"])
    def test_corrupt(self, tmp_path, damage):
        data = bytearray(checkpoint_bytes(self.trained()))
        if damage == "flip":
            data[-5] ^= 0xFF
        elif damage == "truncate":
            data = data[:-4]
        else:
            data[0:8] = b"NOTACKPT"
        (tmp_path / "a.ckpt").write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "a.ckpt")

    def test_errors_are_distinct(self):
        kinds = {CheckpointVersionError, DictionaryMismatchError, CorruptCheckpointError}
        assert len(kinds) == 3 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="epoch-mean loss under dropout and a fixed learning "
                   "rate oscillates; it is not non-increasing epoch to epoch")
def test_memorization_loss_non_increasing_after_epoch_5():
    songs = toy_songs(0)
    ws = make_note_windows(songs, WindowConfig(8), n_notes=11)
    stream = BatchStream(ws, WindowConfig(8, 64))
    losses = train(build_note_model(11, SCALE), stream,
                   TrainConfig(epochs=120, learning_rate=0.005, patience=None)).history.losses
    assert all(b <= a for a, b in zip(losses[4:], losses[5:]))
