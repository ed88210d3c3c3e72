import json

import numpy as np
import pytest
from PIL import Image

from chmseg import io
from chmseg.chm import chm_infer, chm_train
from chmseg.core import ChmConfig, ChmError, ImagePlane, LabelMap
from chmseg.synth import generate


def write(path, data: bytes):
    path.write_bytes(data)
    return path


class TestImages:
    def test_pgm(self, tmp_path):
        p = write(tmp_path / "a.pgm", b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0]))
        np.testing.assert_array_equal(io.load_image(p).data[0], [[0, 1], [1, 0]])

    def test_pgm_comment_and_16bit(self, tmp_path):
        body = np.array([0, 65535, 32768], dtype=">u2").tobytes()
        p = write(tmp_path / "b.pgm", b"P5 # c\n3 1\n65535\n" + body)
        np.testing.assert_allclose(io.load_image(p).data[0, 0], [0, 1, 32768 / 65535])

    def test_ppm(self, tmp_path):
        p = write(tmp_path / "c.ppm", b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
        np.testing.assert_array_equal(io.load_image(p).data[:, 0, 0], [1, 0, 0])

    def test_zero_bytes(self, tmp_path):
        with pytest.raises(io.FormatError, match="truncated"):
            io.load_image(write(tmp_path / "z.png", b""))

    def test_truncated_pixels(self, tmp_path):
        with pytest.raises(io.FormatError, match="truncated"):
            io.load_image(write(tmp_path / "t.pgm", b"P5\n4 4\n255\n" + bytes(5)))

    def test_truncated_png(self, tmp_path):
        full = tmp_path / "full.png"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(full)
        cut = write(tmp_path / "cut.png", full.read_bytes()[:30])
        with pytest.raises(io.FormatError):
            io.load_image(cut)

    def test_unsupported(self, tmp_path):
        with pytest.raises(io.FormatError, match="unsupported"):
            io.load_image(write(tmp_path / "x.bmp", b"BM\x00\x00garbage"))

    def test_png_modes(self, tmp_path):
        rgb = np.zeros((2, 3, 3), dtype=np.uint8)
        rgb[..., 1] = 255
        Image.fromarray(rgb).save(tmp_path / "rgb.png")
        Image.fromarray(np.dstack([rgb, np.full((2, 3), 7, np.uint8)])).save(tmp_path / "rgba.png")
        Image.fromarray(np.array([[0, 65535]], dtype=np.uint16)).save(tmp_path / "g16.png")
        for name in ("rgb", "rgba"):
            im = io.load_image(tmp_path / f"{name}.png")
            assert im.channels == 3
            np.testing.assert_array_equal(im.data[1], 1.0)
        np.testing.assert_array_equal(io.load_image(tmp_path / "g16.png").data[0], [[0, 1]])

    def test_depth_plane(self, tmp_path):
        Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "rgb.png")
        Image.fromarray(np.array([[10, 20], [30, 50]], dtype=np.uint8)).save(tmp_path / "d.png")
        im = io.load_image(tmp_path / "rgb.png", tmp_path / "d.png")
        assert im.channels == 4
        np.testing.assert_allclose(im.data[3], [[0, 0.25], [0.5, 1]])

    def test_lossless_round_trip(self, tmp_path):
        probs = np.random.default_rng(0).random((5, 6))
        io.save_probability_png(tmp_path / "p.png", probs)
        back = io.read_pixels(tmp_path / "p.png")[0]
        np.testing.assert_array_equal(np.round(back * 65535), np.round(probs * 65535))

    def test_half_encodes_32768(self, tmp_path):
        io.save_probability_png(tmp_path / "h.png", np.full((1, 1), 0.5))
        assert np.asarray(Image.open(tmp_path / "h.png"))[0, 0] == 32768


class TestLabels:
    def save(self, path, values):
        Image.fromarray(np.asarray(values, dtype=np.uint8)).save(path)
        return path

    def test_binary_mask(self, tmp_path):
        lab = io.load_labels(self.save(tmp_path / "m.png", [[0, 255], [255, 0]]))
        np.testing.assert_array_equal(lab.data, [[0, 1], [1, 0]])

    def test_class_ids(self, tmp_path):
        assert io.load_labels(self.save(tmp_path / "a.png", [[7]]), class_count=8).data[0, 0] == 7
        with pytest.raises(ChmError):
            io.load_labels(self.save(tmp_path / "b.png", [[9]]), class_count=8)

    def test_rgb_rejected(self, tmp_path):
        Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "c.png")
        with pytest.raises(io.FormatError, match="single-channel"):
            io.load_labels(tmp_path / "c.png")

    def test_edge_directory(self, tmp_path):
        d = tmp_path / "ann"
        d.mkdir()
        self.save(d / "a.png", [[0, 3]])
        self.save(d / "b.png", [[9, 0]])
        maps = io.load_labels(d, task="edge")
        assert len(maps) == 2
        np.testing.assert_array_equal(maps[1], [[1, 0]])


class TestManifest:
    def make(self, tmp_path, missing=False):
        for name in ("i.png", "l.png"):
            Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / name)
        entries = [{"image": "i.png", "label": "gone.png" if missing else "l.png", "split": "train"}]
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"classCount": 2, "task": "label", "entries": entries}))
        return path

    def test_relative_paths(self, tmp_path):
        m = io.load_manifest(self.make(tmp_path))
        assert m.entries[0].image == tmp_path / "i.png"
        assert len(m.split("train")) == 1 and not m.split("test")

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(io.FormatError, match="gone.png"):
            io.load_manifest(self.make(tmp_path, missing=True))

    def test_bad_json_has_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "entries": [\n')
        with pytest.raises(io.FormatError, match=r"bad.json:\d+"):
            io.load_manifest(p)

    def test_round_trip(self, tmp_path):
        m = io.load_manifest(self.make(tmp_path))
        io.save_manifest(m, tmp_path / "copy.json")
        again = io.load_manifest(tmp_path / "copy.json")
        assert again.to_dict() == m.to_dict()


@pytest.fixture(scope="module")
def model():
    pairs = generate("textures", 3, 20, 0)
    data = [(ImagePlane(im), LabelMap(lab)) for im, lab in pairs]
    config = ChmConfig(levels=2, stages=2, ldnn_groups=2, ldnn_per_group=3, epochs=2, max_samples=400)
    return chm_train(data, config, np.random.default_rng(0)), data


class TestModelPersistence:
    def test_layout(self, tmp_path, model):
        m, _ = model
        io.save_model(m, tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["manifest.json", "stage1_level1.w", "stage1_level2.w", "stage1_topdown.w",
                         "stage2_level2.w", "stage2_topdown.w"]
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["format"] == "chm/1"
        assert ChmConfig.from_dict(manifest["config"]) == m.config
        shared = [c for c in manifest["classifiers"] if "shared" in c]
        assert shared == [{**shared[0], "stage": 2, "level": 1, "shared": "stage1_topdown.w"}]

    def test_blob_byte_layout(self, tmp_path, model):
        m, _ = model
        io.save_model(m, tmp_path)
        clf = m.stages[0].bottom_up[1][0]
        raw = np.frombuffer((tmp_path / "stage1_level2.w").read_bytes(), dtype="<f8")
        d = clf.feature_count
        assert raw[0] == clf.biases[0, 0]
        np.testing.assert_array_equal(raw[1 : d + 1], clf.weights[0, 0])
        assert raw[d + 1] == clf.biases[0, 1]

    def test_round_trip_bit_exact(self, tmp_path, model):
        m, data = model
        io.save_model(m, tmp_path)
        back = io.load_model(tmp_path)
        for a, b in zip(m.stages, back.stages):
            assert a.shared_first == b.shared_first
            for ca, cb in zip(a.bottom_up + [a.top_down], b.bottom_up + [b.top_down]):
                assert ca[0].weights.tobytes() == cb[0].weights.tobytes()
                assert ca[0].biases.tobytes() == cb[0].biases.tobytes()
                assert ca[0].dropout == cb[0].dropout
        assert back.stages[1].bottom_up[0][0] is back.stages[0].top_down[0]
        image = data[0][0]
        assert chm_infer(back, image).data.tobytes() == chm_infer(m, image).data.tobytes()

    def test_deterministic_bytes(self, tmp_path, model):
        m, _ = model
        io.save_model(m, tmp_path / "a")
        io.save_model(m, tmp_path / "b")
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_truncated_blob(self, tmp_path, model):
        io.save_model(model[0], tmp_path)
        blob = tmp_path / "stage1_topdown.w"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(io.FormatError, match="bytes"):
            io.load_model(tmp_path)

    def test_version_mismatch(self, tmp_path, model):
        io.save_model(model[0], tmp_path)
        path = tmp_path / "manifest.json"
        path.write_text(path.read_text().replace('"chm/1"', '"chm/2"'))
        with pytest.raises(io.FormatError, match="chm/2"):
            io.load_model(tmp_path)

    def test_config_from_model_manifest(self, tmp_path, model):
        io.save_model(model[0], tmp_path)
        assert io.load_config(tmp_path / "manifest.json") == model[0].config
