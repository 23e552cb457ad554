"""Protocol client against a scriptable fixture adapter (tests/bb_adapter.py)."""

import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from faudit.blackbox import (
    AdapterError,
    HandshakeError,
    ModelHandle,
    ProtocolError,
    spawn_adapter,
)
from faudit.explainers import RiseConfig, rise, random_baseline
from faudit.faithfulness import FillOperator, ZERO_FILL, deletion_curve, insertion_curve

from oracles import DefectCountModel

ADAPTER = str(Path(__file__).parent / "bb_adapter.py")


def adapter_cmd(mode):
    return [sys.executable, ADAPTER, mode]


def spawn(mode, **kwargs):
    return spawn_adapter(adapter_cmd(mode), **kwargs)


def wafer(rng, size=8):
    return rng.choice([0.0, 0.5, 1.0], size=(1, size, size), p=[0.3, 0.4, 0.3])


# -- handshake ---------------------------------------------------------------------


def test_handshake_exposes_n_classes():
    with spawn("constant") as handle:
        assert handle.n_classes == 2
        assert handle.info["name"] == "constant"


def test_missing_executable_is_spawn_error():
    with pytest.raises(ProtocolError, match="spawn"):
        spawn_adapter(["/no/such/binary-xyz"])


def test_malformed_handshake_names_offending_line():
    with pytest.raises(HandshakeError, match="hello i am not json"):
        spawn("bad-handshake")


def test_version_mismatch_rejected():
    with pytest.raises(HandshakeError, match="version"):
        spawn("wrong-version")


def test_handshake_timeout():
    with pytest.raises(HandshakeError, match="within 0.5"):
        spawn("silent", handshake_timeout=0.5)


def test_exit_before_handshake():
    with pytest.raises(HandshakeError, match="exited"):
        spawn("quit")


def test_exit_after_handshake_fails_predicts():
    with spawn("die") as handle:
        handle._proc.wait(timeout=5)
        with pytest.raises(ProtocolError, match="closed its output"):
            handle.predict(np.zeros((1, 4, 4)))


# -- predict round trips --------------------------------------------------------------


def test_constant_adapter_predicts_half():
    with spawn("constant") as handle:
        probs = handle.predict(np.zeros((1, 4, 4)))
        assert probs.tolist() == [0.5, 0.5]


def test_predict_matches_local_model_exactly():
    model = DefectCountModel()
    rng = np.random.default_rng(0)
    with spawn("defect-count") as handle:
        for _ in range(5):
            image = wafer(rng)
            assert np.array_equal(handle.predict(image), model(image))


def test_floats_round_trip_through_wire():
    rng = np.random.default_rng(1)
    image = rng.standard_normal((1, 6, 6)) * np.pi + 1e-12
    flat = image.ravel()
    x = math.fsum(v * math.sin(i + 1) for i, v in enumerate(flat)) % 1.0
    with spawn("float-mix") as handle:
        probs = handle.predict(image)
    assert probs[0] == x  # bit-exact or the payload was mangled
    assert probs[1] == 1.0 - x


def test_pipelined_batch_matched_by_id():
    # the shuffle adapter buffers 5 requests and answers them in reverse order
    model = DefectCountModel()
    rng = np.random.default_rng(2)
    images = [wafer(rng) for _ in range(100)]
    with spawn("shuffle") as handle:
        got = handle.predict_batch(images)
    want = np.stack([model(img) for img in images])
    assert np.array_equal(got, want)


def test_concurrent_predicts_are_safe():
    model = DefectCountModel()
    rng = np.random.default_rng(3)
    images = [wafer(rng) for _ in range(200)]
    with spawn("defect-count") as handle:
        with ThreadPoolExecutor(max_workers=8) as pool:
            got = list(pool.map(handle.predict, images))
    for g, img in zip(got, images):
        assert np.array_equal(g, model(img))


def test_2d_image_promoted_to_single_channel():
    with spawn("constant") as handle:
        assert handle.predict(np.zeros((4, 4))).shape == (2,)
        with pytest.raises(ValueError, match="c,h,w"):
            handle.predict(np.zeros((2, 1, 4, 4)))


# -- failure surfaces ----------------------------------------------------------


def test_adapter_error_response_raises_and_handle_survives():
    with spawn("error") as handle:
        with pytest.raises(AdapterError, match="synthetic failure"):
            handle.predict(np.zeros((1, 4, 4)))
        with pytest.raises(AdapterError):  # still live, still answering
            handle.predict(np.zeros((1, 4, 4)))


def test_bad_probability_sum_rejected():
    with spawn("bad-probs") as handle:
        with pytest.raises(ProtocolError, match="sum"):
            handle.predict(np.zeros((1, 4, 4)))


def test_response_timeout_poisons_handle():
    with spawn("hang", response_timeout=0.5) as handle:
        with pytest.raises(ProtocolError, match="no response"):
            handle.predict(np.zeros((1, 4, 4)))
        with pytest.raises(ProtocolError):
            handle.predict(np.zeros((1, 4, 4)))


def test_unsolicited_id_is_fatal():
    with spawn("unsolicited") as handle:
        with pytest.raises(ProtocolError, match="unknown request id"):
            handle.predict(np.zeros((1, 4, 4)))


def test_eof_mid_flight_raises():
    with spawn("defect-count") as handle:
        handle.predict(np.zeros((1, 4, 4)))
        handle._proc.kill()
        with pytest.raises(ProtocolError):
            for _ in range(50):  # the kill races the next round trip
                handle.predict(np.zeros((1, 4, 4)))


def test_close_is_idempotent_and_kills_child():
    handle = spawn("constant")
    proc = handle._proc
    handle.close()
    handle.close()
    assert proc.poll() is not None
    with pytest.raises(ProtocolError, match="closed"):
        handle.predict(np.zeros((1, 4, 4)))


def test_wire_trace_written_when_env_set(tmp_path, monkeypatch):
    log = tmp_path / "wire.log"
    monkeypatch.setenv("FAUD_BB_LOG", str(log))
    with spawn("constant") as handle:
        handle.predict(np.zeros((1, 2, 2)))
    text = log.read_text()
    assert '<< {"protocol"' in text
    assert '>> {"id": 0' in text


# -- audit paths through the wire ----------------------------------------------


def test_rise_through_adapter_matches_local_constant_scale():
    # a constant model contributes only a scale: the raw RISE map equals
    # 0.5 x (empirical mean mask field), identical to a local constant predict
    cfg = RiseConfig(n_masks=200, grid=4, p=0.5, seed=3)
    image = np.full((1, 8, 8), 0.5)
    with spawn("constant") as handle:
        wired = rise(handle, image, target_class=1, cfg=cfg)
    local = rise(lambda img: np.array([0.5, 0.5]), image, target_class=1, cfg=cfg)
    assert np.array_equal(wired.values, local.values)
    assert wired.raw_max == pytest.approx(local.raw_max, abs=1e-15)


def test_forward_only_audit_identical_through_wire():
    # the blackbox wrapper must be metrically invisible for forward-only paths
    model = DefectCountModel()
    rng = np.random.default_rng(4)
    cfg = RiseConfig(n_masks=300, grid=4, p=0.5, seed=5)
    fill = FillOperator(ZERO_FILL)
    with spawn("defect-count") as handle:
        for trial in range(3):
            image = wafer(rng)
            direct_map = rise(model, image, target_class=1, cfg=cfg)
            wired_map = rise(handle, image, target_class=1, cfg=cfg)
            assert np.max(np.abs(direct_map.values - wired_map.values)) <= 1e-9

            heat = random_baseline(image, seed=trial)
            for curve_fn in (deletion_curve, insertion_curve):
                direct = curve_fn(model, image, heat, fill)
                wired = curve_fn(handle, image, heat, fill)
                assert np.max(
                    np.abs(direct.probabilities - wired.probabilities)
                ) <= 1e-9
