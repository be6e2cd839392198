import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiersplat.errors import CredentialMissing, HttpError, LlmUnavailable, UnparseableResponse
from hiersplat.llm_client import (
    TEMPLATES,
    HttpClient,
    MockClient,
    PromptTemplate,
    ReplayClient,
    TranscriptRecorder,
    complete,
    mock_key,
    parse_group_json,
    serialize_grouping,
)

GOLDEN = Path(__file__).parent / "golden"

BINDINGS = {
    "size": {"classes input": "book, bottle, chair"},
    "function": {"classes input": "book, bottle, chair", "size": "medium"},
    "geometry_summarize": {"formatted_clusters": '{\n    "cluster_0": ["book"]\n}'},
    "validator": {"formatted_clusters": '{\n    "cluster_0": ["book"]\n}'},
}


class TestTemplates:
    @pytest.mark.parametrize("name", sorted(TEMPLATES))
    def test_rendered_prompts_match_golden(self, name):
        rendered = TEMPLATES[name].render(BINDINGS[name])
        golden = (GOLDEN / f"prompt_{name}.txt").read_text(encoding="utf-8")
        assert rendered == golden

    def test_unresolved_placeholder_raises(self):
        with pytest.raises(ValueError):
            TEMPLATES["function"].render({"classes input": "a"})  # {size} left over

    def test_json_format_block_present(self):
        for tpl in TEMPLATES.values():
            assert '"<GROUP_1>": ["<ITEM_1>", ...]' in tpl.body


class TestParseGroupJson:
    def test_bare_object(self):
        assert parse_group_json('{"A":["x"],"B":["y","z"]}') == {"A": ["x"], "B": ["y", "z"]}

    def test_fenced_with_prose(self):
        text = (
            "Sure! Here is the grouping you asked for:\n"
            "```json\n"
            '{\n  "Tools": ["hammer"],\n  "Soft": ["pillow", "blanket"]\n}\n'
            "```\n"
            "Let me know if you need anything else."
        )
        assert parse_group_json(text) == {"Tools": ["hammer"], "Soft": ["pillow", "blanket"]}

    def test_object_embedded_in_prose(self):
        text = 'the answer {"G": ["a", "b"]} as requested'
        assert parse_group_json(text) == {"G": ["a", "b"]}

    def test_not_json_raises(self):
        with pytest.raises(UnparseableResponse):
            parse_group_json("not json")

    def test_non_grouping_object_rejected(self):
        with pytest.raises(UnparseableResponse):
            parse_group_json('{"a": 3}')

    @given(
        st.dictionaries(
            st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=8),
            st.lists(
                st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=8),
                min_size=1,
                max_size=4,
            ),
            min_size=1,
            max_size=5,
        )
    )
    @settings(max_examples=50, deadline=None)
    def test_parse_inverts_serialize(self, groups):
        assert parse_group_json(serialize_grouping(groups)) == groups


class TestMockClient:
    def test_keyed_lookup(self):
        tpl = TEMPLATES["size"]
        key = mock_key("size", BINDINGS["size"])
        mock = MockClient({key: '{"G": ["book", "bottle", "chair"]}'})
        out = complete(mock, tpl, BINDINGS["size"])
        assert "book" in out

    def test_sequential_responses(self):
        tpl = TEMPLATES["size"]
        key = mock_key("size", BINDINGS["size"])
        mock = MockClient({key: ["garbage", '{"G": ["a"]}']})
        assert complete(mock, tpl, BINDINGS["size"]) == "garbage"
        assert complete(mock, tpl, BINDINGS["size"]) == '{"G": ["a"]}'
        # exhausted queues repeat the last entry
        assert complete(mock, tpl, BINDINGS["size"]) == '{"G": ["a"]}'

    def test_pure_same_inputs_same_outputs(self):
        key = mock_key("size", BINDINGS["size"])
        a = MockClient({key: "reply"})
        b = MockClient({key: "reply"})
        assert a.complete(TEMPLATES["size"], BINDINGS["size"]) == b.complete(
            TEMPLATES["size"], BINDINGS["size"]
        )

    def test_missing_key_raises(self):
        mock = MockClient({})
        with pytest.raises(LlmUnavailable):
            mock.complete(TEMPLATES["size"], BINDINGS["size"])


class _Server(BaseHTTPRequestHandler):
    status = 200
    body = {"choices": [{"message": {"content": '{"G": ["x"]}'}}]}
    calls = 0

    def do_POST(self):
        type(self).calls += 1
        self.send_response(self.status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(json.dumps(self.body).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    server = HTTPServer(("127.0.0.1", 0), _Server)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
    server.shutdown()


class TestHttpClient:
    def test_completes_against_local_server(self, http_server):
        client = HttpClient(http_server, api_key="test-key", retries=1)
        out = client.complete(TEMPLATES["size"], BINDINGS["size"])
        assert out == '{"G": ["x"]}'

    def test_missing_credential(self, http_server, monkeypatch):
        monkeypatch.delenv("HIERSPLAT_LLM_KEY", raising=False)
        client = HttpClient(http_server)
        with pytest.raises(CredentialMissing):
            client.complete(TEMPLATES["size"], BINDINGS["size"])

    def test_429_exhausts_retries(self, http_server, monkeypatch):
        monkeypatch.setattr(_Server, "status", 429)
        monkeypatch.setattr("time.sleep", lambda s: None)
        client = HttpClient(http_server, api_key="k", retries=2)
        with pytest.raises(HttpError) as err:
            client.complete(TEMPLATES["size"], BINDINGS["size"])
        assert err.value.status == 429

    def test_record_then_replay_round_trip(self, http_server, tmp_path):
        path = tmp_path / "transcript.json"
        client = HttpClient(http_server, api_key="k", retries=1)
        client.recorder = TranscriptRecorder(path)
        live = client.complete(TEMPLATES["size"], BINDINGS["size"])
        replay = ReplayClient(path)
        assert replay.complete(TEMPLATES["size"], BINDINGS["size"]) == live

    def test_replay_unknown_request(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text('{"exchanges": []}')
        replay = ReplayClient(path)
        with pytest.raises(LlmUnavailable):
            replay.complete(TEMPLATES["size"], BINDINGS["size"])

    def test_replay_serves_duplicates_in_order(self, tmp_path):
        tpl = PromptTemplate("t", "fixed prompt")
        path = tmp_path / "t.json"
        path.write_text(
            json.dumps(
                {
                    "exchanges": [
                        {"request": "fixed prompt", "response": "first"},
                        {"request": "fixed prompt", "response": "second"},
                    ]
                }
            )
        )
        replay = ReplayClient(path)
        assert replay.complete(tpl, {}) == "first"
        assert replay.complete(tpl, {}) == "second"
