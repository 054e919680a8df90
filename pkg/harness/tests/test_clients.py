"""
Tests for the VLM and segmenter backends.
"""

import json
import tempfile
import unittest
from pathlib import Path

import requests
from django.conf import settings
from django.test import TestCase

from harness.clients import (
    ChatCompletionsVlm,
    FixtureSegmenter,
    HttpSegmenter,
    ScriptBook,
    ScriptedVlm,
    chat,
    load_fixture_oracle,
    segment_phrase,
    with_transport_retries,
)
from harness.conf import build_segmenter, build_vlm, load_config
from harness.exceptions import (
    BackendUnavailable,
    EmptyInput,
    MalformedBackendReply,
    MalformedManifest,
    ScriptExhausted,
)
from harness.masks import RasterMask, rle_encode
from harness.tests.factories import (
    CAT_ID,
    cat_image_ref,
    cat_masks,
    cat_segmenter,
    fixture_payload,
    rect,
    write_json,
)


class FakeResponse:

    def __init__(self, status_code=200, payload=None, body=None):
        self.status_code = status_code
        self.payload = payload
        self.body = body

    def json(self):
        if self.body is not None:
            return json.loads(self.body)
        return self.payload


class FakeSession:
    """Returns queued responses (or raises queued exceptions) and records each POST."""

    def __init__(self, *outcomes):
        self.outcomes = list(outcomes)
        self.posts = []

    def post(self, url, **kwargs):
        self.posts.append((url, kwargs))
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


class SegmentPhraseTests(TestCase):
    """Tests for segment_phrase numbering and validation."""

    def test_fixture_head(self):
        """Test that the head phrase yields one candidate with the head mask."""
        [candidate] = segment_phrase(cat_segmenter(), cat_image_ref(), 'cat head')
        self.assertEqual(candidate.candidate_id, 1)
        self.assertEqual(candidate.source_phrase, 'cat head')
        self.assertEqual(candidate.mask, cat_masks()['head'])

    def test_ids_follow_descending_score(self):
        """Test that candidates are renumbered 1..n by score."""
        candidates = segment_phrase(cat_segmenter(), cat_image_ref(), 'cat ears')
        self.assertEqual([c.candidate_id for c in candidates], [1, 2])
        self.assertEqual([c.score for c in candidates], [0.88, 0.71])
        self.assertEqual(candidates[0].mask, cat_masks()['ear_left'])

    def test_cap_truncates(self):
        """Test that only the best `cap` proposals are kept."""
        candidates = segment_phrase(cat_segmenter(), cat_image_ref(), 'cat ears', cap=1)
        self.assertEqual(len(candidates), 1)
        self.assertEqual(candidates[0].score, 0.88)

    def test_phrase_lookup_is_normalized(self):
        """Test that case and spacing do not matter to fixtures."""
        self.assertEqual(len(segment_phrase(cat_segmenter(), cat_image_ref(), '  Cat   EARS ')), 2)

    def test_unknown_phrase_is_empty(self):
        """Test that a concept the fixture does not know gives no candidates."""
        self.assertEqual(segment_phrase(cat_segmenter(), cat_image_ref(), 'dog tail'), [])

    def test_empty_phrase(self):
        """Test that an empty phrase is refused before calling the backend."""
        with self.assertRaises(EmptyInput):
            segment_phrase(cat_segmenter(), cat_image_ref(), ' ')

    def test_score_out_of_range(self):
        """Test that a proposal scored above 1 is a malformed reply."""
        seg = FixtureSegmenter({CAT_ID: {'cat': [(1.5, cat_masks()['head'])]}})
        with self.assertRaises(MalformedBackendReply):
            segment_phrase(seg, cat_image_ref(), 'cat')

    def test_mask_size_mismatch(self):
        """Test that a proposal of the wrong size is a malformed reply."""
        seg = FixtureSegmenter({CAT_ID: {'cat': [(0.5, RasterMask.empty(8, 8))]}})
        with self.assertRaises(MalformedBackendReply):
            segment_phrase(seg, cat_image_ref(), 'cat')


class FixtureOracleTests(TestCase):
    """Tests for load_fixture_oracle."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_authored_fixture(self):
        """Test that every authored phrase resolves and others are empty."""
        seg = load_fixture_oracle(write_json(self.dir / 'fixture.json', fixture_payload()))
        image = cat_image_ref()
        for phrase in ('cat head', 'cat ears', 'cat eyes', 'cat body'):
            self.assertTrue(seg.segment(image, phrase), phrase)
        self.assertEqual(seg.segment(image, 'cat whiskers'), [])
        [(score, mask)] = seg.segment(image, 'cat head')
        self.assertEqual((score, mask), (0.93, cat_masks()['head']))

    def test_empty_manifest(self):
        """Test that an empty fixture answers nothing for everything."""
        seg = load_fixture_oracle(write_json(self.dir / 'fixture.json', {}))
        self.assertEqual(seg.segment(cat_image_ref(), 'cat head'), [])

    def test_wrong_dimension_rle(self):
        """Test that a proposal whose RLE does not match the image size fails at load time."""
        payload = fixture_payload()
        payload['images'][CAT_ID]['phrases']['cat head'][0]['rle'] = rle_encode(RasterMask.empty(8, 8)).to_json()
        with self.assertRaises(MalformedManifest):
            load_fixture_oracle(write_json(self.dir / 'fixture.json', payload))

    def test_bad_score(self):
        """Test that a non-numeric score is rejected with field details."""
        payload = fixture_payload()
        payload['images'][CAT_ID]['phrases']['cat head'][0]['score'] = 'high'
        with self.assertRaises(MalformedManifest) as ctx:
            load_fixture_oracle(write_json(self.dir / 'fixture.json', payload))
        self.assertIn('score', ctx.exception.errors)

    def test_not_json(self):
        """Test that an unreadable file is a malformed manifest."""
        path = self.dir / 'fixture.json'
        path.write_text('{not json', encoding='utf-8')
        with self.assertRaises(MalformedManifest):
            load_fixture_oracle(path)


class ScriptedVlmTests(TestCase):
    """Tests for the scripted chat backend."""

    def test_three_turn_script(self):
        """Test that turns replay in order and a fourth request fails."""
        vlm = ScriptedVlm(['one', 'two', {'action': 'finalize', 'verified': True}])
        messages = [{'role': 'user', 'content': 'hi'}]
        self.assertEqual(chat(vlm, messages), 'one')
        self.assertEqual(chat(vlm, messages), 'two')
        self.assertEqual(json.loads(chat(vlm, messages)), {'action': 'finalize', 'verified': True})
        with self.assertRaises(ScriptExhausted):
            chat(vlm, messages)

    def test_replay_is_identical(self):
        """Test that two copies of a script answer a conversation identically."""
        turns = ['a', 'b']
        messages = [{'role': 'user', 'content': 'x'}]
        first, second = ScriptedVlm(turns), ScriptedVlm(turns)
        self.assertEqual([first.chat(messages) for _ in turns], [second.chat(messages) for _ in turns])

    def test_chat_needs_messages(self):
        """Test that an empty conversation is refused."""
        with self.assertRaises(EmptyInput):
            chat(ScriptedVlm(['a']), [])

    def test_script_book_list_and_mapping(self):
        """Test both script file shapes."""
        with tempfile.TemporaryDirectory() as tmp:
            shared = ScriptBook.load(write_json(Path(tmp) / 'list.json', ['x', 'y']))
            by_item = ScriptBook.load(write_json(Path(tmp) / 'map.json', {'a': ['first'], 'b': ['second']}))
            wrapped = ScriptBook.load(write_json(Path(tmp) / 'turns.json', {'turns': ['z']}))
        self.assertEqual(shared.for_item('anything').chat([{}]), 'x')
        self.assertEqual(by_item.for_item('b').chat([{}]), 'second')
        self.assertEqual(wrapped.for_item().chat([{}]), 'z')
        with self.assertRaises(ScriptExhausted):
            by_item.for_item('c')

    def test_script_book_rejects_other_shapes(self):
        """Test that a script that is neither a list nor a mapping of lists fails."""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(MalformedManifest):
                ScriptBook.load(write_json(Path(tmp) / 'bad.json', {'a': 'not a list'}))


class TransportRetryTests(TestCase):
    """Tests for with_transport_retries."""

    def test_recovers_after_transient_failures(self):
        """Test that two connection errors are retried with exponential backoff."""
        session = FakeSession(requests.ConnectionError('down'), requests.Timeout('slow'), FakeResponse(200))
        delays = []
        response = with_transport_retries(lambda: session.post('u'), retries=2, backoff=0.5, sleep=delays.append)
        self.assertEqual(response.status_code, 200)
        self.assertEqual(delays, [0.5, 1.0])

    def test_gives_up_after_retries(self):
        """Test that persistent timeouts end in BackendUnavailable."""
        session = FakeSession(*[requests.Timeout('slow')] * 3)
        with self.assertRaises(BackendUnavailable) as ctx:
            with_transport_retries(lambda: session.post('u'), retries=2, backoff=0.1, sleep=lambda _: None)
        self.assertEqual(ctx.exception.attempts, 3)
        self.assertEqual(len(session.posts), 3)

    def test_gateway_errors_are_retried(self):
        """Test that a 503 counts as a transport failure."""
        session = FakeSession(FakeResponse(503), FakeResponse(200))
        response = with_transport_retries(lambda: session.post('u'), retries=1, backoff=0, sleep=lambda _: None)
        self.assertEqual(response.status_code, 200)

    def test_truncated_body_is_retried(self):
        """Test that a connection cut mid-body is retried like a dropped connection."""
        session = FakeSession(requests.exceptions.ChunkedEncodingError('body cut off'), FakeResponse(200))
        response = with_transport_retries(lambda: session.post('u'), retries=1, backoff=0, sleep=lambda _: None)
        self.assertEqual(response.status_code, 200)
        self.assertEqual(len(session.posts), 2)

    def test_other_request_errors_fail_fast(self):
        """Test that a malformed URL becomes BackendUnavailable without retrying."""
        for error in (requests.exceptions.MissingSchema('no scheme'), requests.exceptions.InvalidURL('bad'),
                      requests.exceptions.ContentDecodingError('gzip')):
            with self.subTest(error=type(error).__name__):
                session = FakeSession(error, FakeResponse(200))
                delays = []
                with self.assertRaises(BackendUnavailable) as ctx:
                    with_transport_retries(lambda: session.post('u'), retries=2, backoff=0.5, sleep=delays.append)
                self.assertEqual(ctx.exception.attempts, 1)
                self.assertEqual(delays, [])
                self.assertIn(type(error).__name__, str(ctx.exception))


class HttpClientTests(TestCase):
    """Tests for the live HTTP clients against fake sessions."""

    def test_segmenter_decodes_candidates(self):
        """Test that the segment route's RLE candidates are decoded."""
        head = cat_masks()['head']
        session = FakeSession(FakeResponse(200, {'candidates': [
            {'score': 0.9, 'rle': rle_encode(head).to_json(), 'box': [3, 2, 13, 14]},
        ]}))
        seg = HttpSegmenter('http://seg.local/', session=session, sleep=lambda _: None)
        [(score, mask)] = seg.segment(cat_image_ref(), 'cat head')
        self.assertEqual((score, mask), (0.9, head))
        url, kwargs = session.posts[0]
        self.assertEqual(url, 'http://seg.local/segment')
        self.assertEqual(kwargs['json']['phrase'], 'cat head')

    def test_segmenter_malformed_body(self):
        """Test that a reply without candidates is malformed, not retried."""
        session = FakeSession(FakeResponse(200, {'masks': []}))
        seg = HttpSegmenter('http://seg.local', session=session)
        with self.assertRaises(MalformedBackendReply):
            seg.segment(cat_image_ref(), 'cat head')
        self.assertEqual(len(session.posts), 1)

    def test_segmenter_unavailable(self):
        """Test that a dead segmenter surfaces as BackendUnavailable after R retries."""
        session = FakeSession(*[requests.ConnectionError('refused')] * 3)
        seg = HttpSegmenter('http://seg.local', retries=2, session=session, sleep=lambda _: None)
        with self.assertRaises(BackendUnavailable):
            seg.segment(cat_image_ref(), 'cat head')

    def test_chat_completion(self):
        """Test request shape and reply extraction of the chat client."""
        session = FakeSession(FakeResponse(200, {'choices': [{'message': {'content': 'hello'}}]}))
        vlm = ChatCompletionsVlm('http://vlm.local/v1', 'some-model', api_key='k', session=session)
        self.assertEqual(vlm.chat([{'role': 'user', 'content': 'hi'}]), 'hello')
        url, kwargs = session.posts[0]
        self.assertEqual(url, 'http://vlm.local/v1/chat/completions')
        self.assertEqual(kwargs['json']['model'], 'some-model')
        self.assertEqual(kwargs['headers']['Authorization'], 'Bearer k')

    def test_chat_completion_content_parts(self):
        """Test that list-shaped content is joined into text."""
        session = FakeSession(FakeResponse(200, {'choices': [{'message': {'content': [
            {'type': 'text', 'text': 'a'}, {'type': 'text', 'text': 'b'},
        ]}}]}))
        self.assertEqual(ChatCompletionsVlm('http://vlm.local', 'm', session=session).chat([{}]), 'ab')

    def test_chat_completion_errors(self):
        """Test that HTTP errors and missing choices are malformed replies."""
        for response in (FakeResponse(401, {}), FakeResponse(200, {'choices': []}), FakeResponse(200, body='<html>')):
            with self.subTest(status=response.status_code):
                vlm = ChatCompletionsVlm('http://vlm.local', 'm', session=FakeSession(response))
                with self.assertRaises(MalformedBackendReply):
                    vlm.chat([{}])


@unittest.skipUnless(settings.VASA.get('LIVE_SMOKE'), 'set VASA_LIVE_SMOKE=1 to talk to the configured backends')
class LiveSmokeTests(TestCase):
    """Optional checks against the backends configured in the environment."""

    def test_vlm_echo(self):
        """Test that the configured VLM answers a trivial prompt."""
        vlm = build_vlm(load_config().backends)
        reply = chat(vlm, [{'role': 'user', 'content': 'Reply with the single word: ready'}])
        self.assertTrue(reply.strip())

    def test_segmenter_round_trip(self):
        """Test that the configured segmenter answers with well-formed candidates."""
        seg = build_segmenter(load_config().backends)
        for candidate in segment_phrase(seg, cat_image_ref(), 'orange square'):
            self.assertEqual(candidate.mask.shape, rect(0, 0, 1, 1).shape)
