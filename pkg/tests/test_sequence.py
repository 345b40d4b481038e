from pathlib import Path
from typing import List

import numpy as np
import pytest
from pydantic import ValidationError

from alltok.base import MASK_SIZE, RECORD_LENGTH
from alltok.exceptions import (
    DecodeError,
    SequenceFormatError,
    TokenIndexError,
    VocabularyMismatchError,
)
from alltok.sequence import (
    EOS,
    InstanceAnnotation,
    TokenSequence,
    Vocabulary,
    crop_mask,
    decode_depth,
    decode_depth_soft,
    decode_instances,
    dequantize_box,
    encode_depth,
    encode_instances,
    noise_boxes,
    parse_instance_records,
    quantize_box,
    read_sequences,
    restrict_probs,
    write_sequences,
)
from alltok.tokenizer import TokenizerModel
from alltok.utils import one_hot


def _instances() -> List[InstanceAnnotation]:
    mask = np.zeros((MASK_SIZE, MASK_SIZE), dtype=bool)
    mask[8:56, 8:56] = True
    return [
        InstanceAnnotation(box=(0.1, 0.2, 0.5, 0.6), class_id=0, mask64=mask),
        InstanceAnnotation(box=(0.4, 0.0, 1.0, 0.3), class_id=1, mask64=~mask),
    ]


def _grids() -> List[np.ndarray]:
    return [np.arange(16).reshape(4, 4) % 8, np.full((4, 4), 5)]


def test_default_vocabulary_layout() -> None:
    vocabulary = Vocabulary()
    assert [(r.name, r.start, r.size) for r in vocabulary.ranges()] == [
        ("special", 0, 4),
        ("coord", 4, 2000),
        ("class", 2004, 3),
        ("mask", 2007, 128),
        ("depth", 2135, 128),
    ]
    assert vocabulary.size == 2263
    assert vocabulary.background_token == 2006
    assert vocabulary.locate(2136) == ("depth", 1)
    assert vocabulary.task_token("dep") != vocabulary.task_token("ins")
    with pytest.raises(TokenIndexError):
        vocabulary.locate(2263)
    with pytest.raises(TokenIndexError):
        vocabulary.token("mask", 128)


def test_vocabulary_mismatch(vocabulary: Vocabulary) -> None:
    vocabulary.check_compatible(Vocabulary.model_validate(vocabulary.model_dump()))
    with pytest.raises(VocabularyMismatchError) as error:
        vocabulary.check_compatible(vocabulary.model_copy(update={"depth_codebook_size": 16}))
    assert error.value.diff == {"depth_codebook_size": (8, 16)}


def test_box_quantization() -> None:
    assert quantize_box((0.0, 0.0, 1.0, 1.0), 2000) == [0, 0, 1999, 1999]
    restored = dequantize_box(quantize_box((0.1234, 0.5, 0.75, 0.9999), 2000), 2000)
    assert np.abs(np.subtract(restored, (0.1234, 0.5, 0.75, 0.9999))).max() <= 1 / 4000
    with pytest.raises(SequenceFormatError):
        quantize_box((0.0, 0.0, 1.2, 1.0), 2000)


def test_encode_instances_layout(mask_tokenizer: TokenizerModel, vocabulary: Vocabulary) -> None:
    sequence = encode_instances(
        _instances(), mask_tokenizer, 1, np.random.default_rng(0), vocabulary, mask_tokens=_grids()
    )
    assert len(sequence) == 3 * RECORD_LENGTH + 1
    assert sequence.ids[-1] == EOS
    assert sequence.loss_mask[-1]
    noise = slice(2 * RECORD_LENGTH, 3 * RECORD_LENGTH)
    assert sequence.ids[noise][4] == vocabulary.background_token
    assert sequence.loss_mask[noise] == [True] * 5 + [False] * 16
    assert all(sequence.loss_mask[: 2 * RECORD_LENGTH])
    records = parse_instance_records(sequence.ids, vocabulary)
    real = sorted((r.class_offset, tuple(r.mask_offsets)) for r in records[:2])
    assert real == [(0, tuple(_grids()[0].reshape(-1))), (1, (5,) * 16)]


def test_encode_instances_reports_record_order(mask_tokenizer: TokenizerModel, vocabulary: Vocabulary) -> None:
    instances = [InstanceAnnotation.noise((0.0, 0.0, 0.5, 0.5)), *_instances()]
    grids = [np.zeros((4, 4), dtype=np.int64), *_grids()]
    for seed in range(4):
        sequence = encode_instances(
            instances, mask_tokenizer, 1, np.random.default_rng(seed), vocabulary, mask_tokens=grids
        )
        assert sorted(sequence.record_order) == [1, 2]
        records = parse_instance_records(sequence.ids, vocabulary)
        for record, position in zip(records, sequence.record_order):
            assert record.class_offset == instances[position].class_id
            assert record.mask_offsets == grids[position].reshape(-1).tolist()
    assert encode_instances([], mask_tokenizer, 2, np.random.default_rng(0), vocabulary).record_order == []


def test_encode_instances_tokenizes_masks(mask_tokenizer: TokenizerModel, vocabulary: Vocabulary) -> None:
    sequence = encode_instances(_instances(), mask_tokenizer, 0, np.random.default_rng(0), vocabulary)
    assert len(sequence) == 2 * RECORD_LENGTH + 1
    for record in parse_instance_records(sequence.ids, vocabulary):
        assert all(0 <= offset < 8 for offset in record.mask_offsets)


def test_empty_instance_list(mask_tokenizer: TokenizerModel, vocabulary: Vocabulary) -> None:
    sequence = encode_instances([], mask_tokenizer, 0, np.random.default_rng(0), vocabulary)
    assert sequence.ids == [EOS]
    assert decode_instances(sequence, mask_tokenizer, vocabulary) == []


def test_instance_codec_needs_four_by_four_grid(depth_tokenizer: TokenizerModel, vocabulary: Vocabulary) -> None:
    with pytest.raises(SequenceFormatError):
        encode_instances(_instances(), depth_tokenizer, 0, np.random.default_rng(0), vocabulary)


def test_parse_errors_report_offsets(vocabulary: Vocabulary) -> None:
    with pytest.raises(DecodeError) as error:
        parse_instance_records([vocabulary.coord.start] * 5 + [EOS], vocabulary)
    assert error.value.offset == 5
    record = [vocabulary.coord.start] * 4 + [vocabulary.mask.start] + [vocabulary.mask.start] * 16
    with pytest.raises(DecodeError) as error:
        parse_instance_records(record + record + [EOS], vocabulary)
    assert error.value.offset == 4


def test_decode_instances_round_trip(mask_tokenizer: TokenizerModel, vocabulary: Vocabulary) -> None:
    instances = _instances()
    sequence = encode_instances(
        instances, mask_tokenizer, 2, np.random.default_rng(1), vocabulary, mask_tokens=_grids()
    )
    decoded = decode_instances(sequence, mask_tokenizer, vocabulary)
    assert sorted(d.class_id for d in decoded) == [0, 1]
    for item in decoded:
        original = instances[item.class_id]
        assert np.abs(np.subtract(item.box, original.box)).max() <= 1 / (2 * vocabulary.n_coord_bins) + 1e-12
        assert item.mask64.shape == (MASK_SIZE, MASK_SIZE)
        assert item.score == 1.0


def test_score_threshold_and_soft_masks(mask_tokenizer: TokenizerModel, vocabulary: Vocabulary) -> None:
    sequence = encode_instances(
        _instances()[:1], mask_tokenizer, 0, np.random.default_rng(0), vocabulary, mask_tokens=_grids()[:1]
    )
    probs = one_hot(np.asarray(sequence.ids), vocabulary.size, dtype=np.float64)
    probs[4] *= 0.4
    probs[4, vocabulary.background_token] = 0.6
    scored = sequence.model_copy(update={"probs": probs})
    assert decode_instances(scored, mask_tokenizer, vocabulary, score_threshold=0.5) == []
    hard = decode_instances(scored, mask_tokenizer, vocabulary, mode="hard")
    soft = decode_instances(scored, mask_tokenizer, vocabulary, mode="soft")
    assert hard[0].score == pytest.approx(0.4)
    assert np.array_equal(hard[0].mask64, soft[0].mask64)
    fallback = decode_instances(sequence, mask_tokenizer, vocabulary, mode="soft")
    assert np.array_equal(fallback[0].mask64, hard[0].mask64)


def test_depth_codec(vocabulary: Vocabulary) -> None:
    grid = np.array([[0, 7], [3, 3]])
    sequence = encode_depth(grid, vocabulary)
    assert sequence.ids[0] == vocabulary.depth.start
    assert np.array_equal(decode_depth(sequence, vocabulary, (2, 2)), grid)
    assert np.array_equal(decode_depth_soft(sequence, vocabulary, (2, 2)).argmax(), grid)
    with pytest.raises(SequenceFormatError):
        decode_depth(sequence, vocabulary, (3, 3))
    depth_token = vocabulary.depth.start
    broken = TokenSequence(ids=[depth_token, EOS, depth_token, depth_token], loss_mask=[True] * 4, task="dep")
    with pytest.raises(DecodeError) as error:
        decode_depth(broken, vocabulary, (2, 2))
    assert error.value.offset == 1


def test_soft_depth_restricts_probabilities(vocabulary: Vocabulary) -> None:
    sequence = encode_depth(np.zeros((1, 2), dtype=np.int64), vocabulary)
    probs = np.zeros((2, vocabulary.size))
    probs[:, vocabulary.depth.start] = 0.3
    probs[:, vocabulary.depth.start + 2] = 0.3
    probs[:, EOS] = 0.4
    soft = decode_depth_soft(sequence.model_copy(update={"probs": probs}), vocabulary, (1, 2))
    assert soft.probs.shape == (1, 2, 8)
    assert soft.probs[0, 0, [0, 2]].tolist() == pytest.approx([0.5, 0.5])


def test_restrict_probs_without_mass_falls_back_to_one_hot(vocabulary: Vocabulary) -> None:
    probs = np.zeros((1, vocabulary.size))
    probs[0, EOS] = 1.0
    restricted = restrict_probs(probs, vocabulary.depth)
    assert restricted.probs.tolist() == [[1.0] + [0.0] * 7]


def test_token_sequence_validation(vocabulary: Vocabulary, tmp_path: Path) -> None:
    with pytest.raises(ValidationError):
        TokenSequence(ids=[1, 2], loss_mask=[True], task="dep")
    with pytest.raises(DecodeError) as error:
        TokenSequence(ids=[1, vocabulary.size], loss_mask=[True, True], task="ins").check_vocabulary(vocabulary)
    assert error.value.offset == 1
    sequences = [encode_depth(np.ones((2, 2), dtype=np.int64), vocabulary)]
    write_sequences(tmp_path / "sequences.jsonl", sequences)
    assert [s.ids for s in read_sequences(tmp_path / "sequences.jsonl")] == [sequences[0].ids]


def test_crop_and_paste_pixel_aligned_box() -> None:
    full = np.zeros((64, 64), dtype=bool)
    full[8:40, 16:32] = True
    box = (16 / 64, 8 / 64, 32 / 64, 40 / 64)
    crop = crop_mask(full, box)
    assert crop.all()
    pasted = InstanceAnnotation(box=box, class_id=0, mask64=crop).paste(64)
    assert np.array_equal(pasted, full)


def test_instance_validation() -> None:
    mask = np.zeros((MASK_SIZE, MASK_SIZE), dtype=bool)
    with pytest.raises(ValidationError):
        InstanceAnnotation(box=(0.5, 0.0, 0.2, 1.0), class_id=0, mask64=mask)
    with pytest.raises(ValidationError):
        InstanceAnnotation(box=(0.0, 0.0, 1.0, 1.0), class_id=0, mask64=np.zeros((32, 32), dtype=bool))
    with pytest.raises(ValidationError):
        InstanceAnnotation(box=(0.0, 0.0, 1.0, 1.0), class_id=0, mask64=mask, is_noise=True)
    assert InstanceAnnotation.noise((0.0, 0.0, 0.5, 0.5)).is_noise


def test_noise_boxes_stay_normalized() -> None:
    boxes = noise_boxes(_instances(), 7, np.random.default_rng(3))
    assert len(boxes) == 7
    for x0, y0, x1, y1 in boxes:
        assert 0.0 <= x0 <= x1 <= 1.0
        assert 0.0 <= y0 <= y1 <= 1.0
