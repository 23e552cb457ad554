import io
import json

import numpy as np
import pytest
from model_adapter_ref.server import PROTOCOL_NAME, PROTOCOL_VERSION, AdapterSession, serve


def run_session(predict, n_classes, lines, **kwargs):
    """Feed raw request lines through one session; returns parsed output lines."""
    stdin = io.StringIO("".join(line + "\n" for line in lines))
    stdout = io.StringIO()
    session = AdapterSession(predict, n_classes, stdin=stdin, stdout=stdout, **kwargs)
    served = session.run()
    out = [json.loads(line) for line in stdout.getvalue().splitlines()]
    return out, served, session


def request(rid, image) -> str:
    arr = np.asarray(image, dtype=np.float64)
    return json.dumps({"id": rid, "shape": list(arr.shape), "data": arr.ravel().tolist()})


def uniform3(image):
    return np.array([1 / 3, 1 / 3, 1 / 3])


def test_handshake_is_first_line_and_carries_class_count():
    out, served, _ = run_session(uniform3, 3, [])
    assert served == 0
    assert out == [
        {"protocol": PROTOCOL_NAME, "version": PROTOCOL_VERSION, "n_classes": 3}
    ]


def test_responses_come_back_in_arrival_order():
    lines = [request(rid, np.zeros((1, 2, 2))) for rid in (5, 3, 9)]
    out, served, _ = run_session(uniform3, 3, lines)
    assert served == 3
    assert [msg["id"] for msg in out[1:]] == [5, 3, 9]
    for msg in out[1:]:
        assert msg["probs"] == pytest.approx([1 / 3, 1 / 3, 1 / 3])


def test_logits_are_softmaxed_and_probs_passed_through():
    def logits_model(image):
        return np.array([0.0, np.log(3.0)])

    out, _, _ = run_session(logits_model, 2, [request(0, np.zeros((1, 2, 2)))])
    assert out[1]["probs"] == pytest.approx([0.25, 0.75], abs=1e-12)

    def probs_model(image):
        return np.array([0.3, 0.7])

    out, _, _ = run_session(probs_model, 2, [request(0, np.zeros((1, 2, 2)))])
    assert out[1]["probs"] == pytest.approx([0.3, 0.7], abs=1e-15)


def test_negative_values_take_the_softmax_path_even_when_summing_to_one():
    def model(image):
        return np.array([-0.5, 1.5])

    out, _, _ = run_session(model, 2, [request(0, np.zeros((1, 2, 2)))])
    expected = np.exp([-0.5, 1.5])
    expected /= expected.sum()
    assert out[1]["probs"] == pytest.approx(list(expected), abs=1e-12)


def test_probs_are_renormalized_so_the_sum_is_exact():
    def model(image):
        # valid distribution within the 1e-6 detection window, but not exact
        return np.array([0.5000001, 0.4999996])

    out, _, _ = run_session(model, 2, [request(0, np.zeros((1, 2, 2)))])
    assert out[1]["probs"] != [0.5000001, 0.4999996]
    assert abs(sum(out[1]["probs"]) - 1.0) < 1e-15


def test_floats_round_trip_bit_exactly_through_the_wire():
    values = np.array([np.nextafter(0.1, 1.0), 1.0 - np.nextafter(0.1, 1.0)])

    def model(image):
        return values

    out, _, _ = run_session(model, 2, [request(0, np.zeros((1, 2, 2)))])
    normalized = values / values.sum()
    assert out[1]["probs"][0] == normalized[0]
    assert out[1]["probs"][1] == normalized[1]


def test_malformed_json_yields_error_and_session_continues():
    lines = ["{not json", request(1, np.zeros((1, 2, 2)))]
    out, served, _ = run_session(uniform3, 3, lines)
    assert served == 2
    assert out[1]["id"] is None and "invalid JSON" in out[1]["error"]
    assert out[2]["id"] == 1 and "probs" in out[2]


@pytest.mark.parametrize(
    "payload, fragment",
    [
        ("[1, 2, 3]", "JSON object"),
        (json.dumps({"id": 7, "shape": "nope", "data": []}), "shape"),
        (json.dumps({"id": 7, "shape": [1, 2, 2, 2, 2], "data": [0.0] * 16}), "rank"),
        (json.dumps({"id": 7, "shape": [1, 2, 2], "data": [0.0] * 3}), "needs 4"),
        (json.dumps({"id": 7, "shape": [1, 2, 2], "data": "x"}), "list of numbers"),
        (json.dumps({"id": 7, "shape": [1, 2, 2], "data": [0.0, 1.0, 2.0, "x"]}), "numeric"),
    ],
)
def test_invalid_requests_get_error_responses_with_echoed_id(payload, fragment):
    out, served, _ = run_session(uniform3, 3, [payload, request(8, np.zeros((1, 2, 2)))])
    assert served == 2
    error = out[1]
    assert fragment in error["error"]
    if error["id"] is not None:
        assert error["id"] == 7
    assert out[2]["id"] == 8 and "probs" in out[2]


def test_non_finite_image_data_is_rejected():
    payload = json.dumps({"id": 2, "shape": [1, 1, 2], "data": [0.0, float("inf")]})
    out, _, _ = run_session(uniform3, 3, [payload])
    assert out[1] == {"id": 2, "error": "data contains non-finite values"}


def test_predictor_exception_becomes_error_response_and_loop_survives():
    def flaky(image):
        if image.sum() > 0:
            raise RuntimeError("boom")
        return np.array([0.5, 0.5])

    lines = [request(0, np.ones((1, 2, 2))), request(1, np.zeros((1, 2, 2)))]
    out, served, _ = run_session(flaky, 2, lines)
    assert served == 2
    assert out[1]["id"] == 0 and "boom" in out[1]["error"]
    assert out[2]["id"] == 1 and out[2]["probs"] == [0.5, 0.5]


def test_wrong_output_width_is_reported_per_request():
    def narrow(image):
        return np.array([1.0])

    out, _, _ = run_session(narrow, 3, [request(4, np.zeros((1, 2, 2)))])
    assert out[1]["id"] == 4
    assert "returned 1 values, expected 3" in out[1]["error"]


def test_rank_two_shapes_are_promoted_to_single_channel():
    seen = []

    def spy(image):
        seen.append(image.shape)
        return np.array([0.5, 0.5])

    payload = json.dumps({"id": 0, "shape": [2, 2], "data": [0.0, 1.0, 2.0, 3.0]})
    out, _, _ = run_session(spy, 2, [payload])
    assert seen == [(1, 2, 2)]
    assert out[1]["probs"] == [0.5, 0.5]


def test_blank_lines_are_skipped_without_responses():
    lines = ["", "   ", request(0, np.zeros((1, 2, 2)))]
    out, served, _ = run_session(uniform3, 3, lines)
    assert served == 1
    assert len(out) == 2  # handshake + one response


def test_request_log_records_ids_and_shapes_when_enabled():
    lines = [request(3, np.zeros((1, 4, 4))), "{broken"]
    _, _, session = run_session(uniform3, 3, lines, log_requests=True)
    assert session.request_log == [(3, (1, 4, 4))]


def test_class_count_is_validated_up_front():
    with pytest.raises(ValueError, match="n_classes"):
        AdapterSession(uniform3, 1)


def test_serve_returns_request_count():
    stdin = io.StringIO(request(0, np.zeros((1, 2, 2))) + "\n")
    stdout = io.StringIO()
    assert serve(uniform3, 3, stdin=stdin, stdout=stdout) == 1
