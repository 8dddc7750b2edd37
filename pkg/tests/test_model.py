import copy

import pytest
import torch

from gameskill.model import (
    AudioBranch,
    ChatPriorNet,
    FusionHead,
    ModelConfig,
    ScoreHead,
    SkillNet,
    VideoBranch,
    Vocabulary,
    integrate_prior_before_fc,
    integrate_prior_before_gru,
    repeat_prior,
    zero_biases,
)
from gameskill.preprocess import get_view

CFG = ModelConfig(hidden_dim=8, conv_channels=4, frame_features=8, audio_channels=8, prior_dim=5, seq_len=30)


def video(b=2, t=12, h=32, w=32, c=1, seed=0):
    return torch.rand(b, c, t, h, w, generator=torch.Generator().manual_seed(seed)) - 0.5


def mfcc(b=2, frames=120, seed=0):
    return torch.randn(b, frames, 20, generator=torch.Generator().manual_seed(seed))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(seq_len=0)
    assert ModelConfig.full_scale().hidden_dim == 256


# -- branches ----------------------------------------------------------------


def test_video_branch_shape():
    out = VideoBranch(CFG)(video())
    assert out.shape == (2, 30, 8)
    assert torch.isfinite(out).all()


def test_video_branch_zero_input_constant_sequence():
    branch = zero_biases(VideoBranch(CFG))
    out = branch(torch.zeros(1, 1, 10, 32, 32))
    assert torch.allclose(out, out[:, :1].expand_as(out))


def test_video_frontend_temporal_receptive_field():
    branch = VideoBranch(CFG).eval()
    x = video(b=1, t=10)
    y = x.clone()
    y[:, :, 7:] = torch.rand_like(y[:, :, 7:])
    # a 3-frame temporal kernel at stride 1: frame features k <= 5 see only frames k-1..k+1 <= 6
    fx, fy = branch.frame_features(x), branch.frame_features(y)
    assert torch.equal(fx[:, :6], fy[:, :6])
    assert not torch.equal(fx[:, 6:], fy[:, 6:])


def test_video_branch_shape_errors():
    with pytest.raises(ValueError):
        VideoBranch(CFG)(torch.zeros(1, 3, 4, 16, 16))
    with pytest.raises(ValueError):
        VideoBranch(CFG)(torch.zeros(1, 4, 16, 16))


def test_audio_branch_shape_and_length_contract():
    branch = AudioBranch(CFG).eval()
    assert branch(mfcc(frames=120)).shape == (2, 30, 8)
    assert branch(mfcc(frames=240)).shape == (2, 30, 8)
    with pytest.raises(ValueError):
        branch(torch.zeros(1, 50, 13))


def test_audio_constant_input_constant_features():
    branch = AudioBranch(CFG)
    x = torch.ones(1, 90, 20) * torch.linspace(-1, 1, 20)
    feats = branch.features(x)
    assert torch.allclose(feats, feats[:, :1].expand_as(feats), atol=1e-6)


# -- fusion ------------------------------------------------------------------


def test_fusion_sums_to_one_and_embedding_shape():
    net = SkillNet(CFG, ("audio", "video")).eval()
    logits, emb, outputs = net({"audio": mfcc(), "video": video()})
    probs = torch.softmax(logits, -1)
    assert torch.allclose(probs.sum(-1), torch.ones(2))
    assert emb.shape == (2, 16)
    assert set(outputs) == {"audio", "video"}


def test_zero_final_affine_gives_uniform():
    net = SkillNet(CFG, ("audio", "video")).eval()
    with torch.no_grad():
        net.head.fc.weight.zero_()
        net.head.fc.bias.zero_()
    probs = net.predict_proba({"audio": mfcc(), "video": video()})
    assert torch.allclose(probs, torch.full_like(probs, 0.25))


def test_permuting_class_rows_permutes_probabilities():
    net = SkillNet(CFG, ("audio", "video")).eval()
    batch = {"audio": mfcc(), "video": video()}
    before = net.predict_proba(batch)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        net.head.fc.weight.copy_(net.head.fc.weight[perm])
        net.head.fc.bias.copy_(net.head.fc.bias[perm])
    assert torch.allclose(net.predict_proba(batch), before[:, perm], atol=1e-7)


def test_stream_order_is_audio_then_video():
    net = SkillNet(CFG, ("audio", "video")).eval()
    batch = {"audio": mfcc(), "video": video()}
    outs = net.branch_outputs(batch)
    steps = torch.cat([outs["audio"], outs["video"]], dim=-1)
    assert torch.equal(net.head(steps)[0], net(batch)[0])


def test_eval_is_deterministic():
    net = SkillNet(CFG, ("audio", "video")).eval()
    batch = {"audio": mfcc(), "video": video()}
    assert torch.equal(net(batch)[0], net(batch)[0])


# -- multiview ---------------------------------------------------------------

VIEWS = ("view:minimap", "view:top", "view:center", "view:health", "view:guns")


def test_five_views_concatenated_width():
    net = SkillNet(CFG, VIEWS)
    assert net.head.gru.input_size == 5 * CFG.hidden_dim
    logits, _, outputs = net({"video": video(h=40, w=40)})
    assert logits.shape == (2, 4) and len(outputs) == 5


def test_single_view_is_single_stream():
    net = SkillNet(CFG, ("view:health",))
    assert net.head.gru.input_size == CFG.hidden_dim
    assert net({"video": video(h=40, w=40)})[0].shape == (2, 4)


def test_zeroed_view_stream_is_ignored():
    net = SkillNet(CFG, VIEWS).eval()
    with torch.no_grad():
        proj = net.branch("view:minimap").branch.rnn.proj
        proj.weight.zero_()
        proj.bias.zero_()
    x = video(b=1, h=40, w=40)
    y = x.clone()
    r0, r1, c0, c1 = get_view("minimap").pixel_bounds(40, 40)
    y[..., r0:r1, c0:c1] = torch.rand_like(y[..., r0:r1, c0:c1])
    # the minimap rectangle is disjoint from every other default view
    assert torch.equal(net({"video": x})[0], net({"video": y})[0])


def test_unknown_stream_rejected():
    with pytest.raises(ValueError):
        SkillNet(CFG, ("radar",))
    with pytest.raises(ValueError):
        SkillNet(CFG, ("video", "video"))


# -- chat prior integration ------------------------------------------------------


def test_before_fc_zero_prior_weights_is_prior_free():
    torch.manual_seed(1)
    head = FusionHead(16, CFG, "before_fc").eval()
    plain = FusionHead(16, CFG, None).eval()
    plain.gru.load_state_dict(head.gru.state_dict())
    with torch.no_grad():
        head.fc.weight[:, 16:].zero_()
        plain.fc.weight.copy_(head.fc.weight[:, :16])
        plain.fc.bias.copy_(head.fc.bias)
    steps = torch.randn(3, 30, 16)
    prior = torch.randn(3, CFG.prior_dim)
    assert torch.allclose(head(steps, prior)[0], plain(steps)[0], atol=1e-6)


def test_before_fc_logit_shift_is_prior_column_sum():
    head = FusionHead(16, CFG, "before_fc")
    emb = torch.randn(2, 16)
    zeros = head.classify(emb, torch.zeros(2, CFG.prior_dim))
    ones = head.classify(emb, torch.ones(2, CFG.prior_dim))
    shift = head.fc.weight[:, 16:].sum(dim=1)
    assert torch.allclose(ones - zeros, shift.expand(2, -1), atol=1e-6)
    probs = integrate_prior_before_fc(head.fc, emb, torch.ones(2, CFG.prior_dim))
    assert torch.allclose(probs.sum(-1), torch.ones(2))


def test_before_gru_width_and_zero_ablation():
    head = FusionHead(16, CFG, "before_gru").eval()
    assert head.gru.input_size == 2 * CFG.hidden_dim + CFG.prior_dim
    plain = FusionHead(16, CFG, None).eval()
    state = copy.deepcopy(head.state_dict())
    with torch.no_grad():
        state["gru.weight_ih_l0"] = state["gru.weight_ih_l0"][:, :16]
        state["gru.weight_ih_l0_reverse"] = state["gru.weight_ih_l0_reverse"][:, :16]
    plain.load_state_dict(state)
    a, v = torch.randn(2, 30, 8), torch.randn(2, 30, 8)
    zero_prior = torch.zeros(2, CFG.prior_dim)
    assert torch.allclose(integrate_prior_before_gru(head, v, a, zero_prior), torch.softmax(plain(torch.cat([a, v], -1))[0], -1), atol=1e-6)


def test_repeated_prior_is_step_constant():
    steps = torch.randn(2, 30, 16)
    prior = torch.randn(2, 5)
    out = repeat_prior(steps, prior)
    assert out.shape == (2, 30, 21)
    assert torch.equal(out[:, :, 16:], prior[:, None, :].expand(-1, 30, -1))


def test_missing_prior_errors():
    with pytest.raises(ValueError):
        FusionHead(16, CFG, "before_fc")(torch.randn(1, 30, 16))
    with pytest.raises(ValueError):
        FusionHead(16, CFG, "sideways")


# -- score head --------------------------------------------------------------------


def test_score_head_zero_and_linear():
    head = ScoreHead(8)
    with torch.no_grad():
        head.fc.weight.zero_()
        head.fc.bias.zero_()
    assert torch.equal(head(torch.randn(3, 30, 8)), torch.zeros(3))
    head = ScoreHead(8)
    with torch.no_grad():
        head.fc.bias.zero_()
    x, y = torch.randn(3, 30, 8), torch.randn(3, 30, 8)
    assert torch.allclose(head(x + y), head(x) + head(y), atol=1e-6)


# -- chat encoder ------------------------------------------------------------------


def test_vocabulary():
    vocab = Vocabulary.build(["GG wp", "gg ez", "hello"], min_freq=2)
    assert vocab.tokens == ["<pad>", "<unk>", "gg"]
    assert vocab.encode("gg nope") == [2, 1]
    ids, lengths = vocab.batch(["gg", "gg gg gg"])
    assert ids.shape == (2, 3) and lengths.tolist() == [1, 3]


def test_chat_prior_shapes_and_null_prior():
    vocab = Vocabulary.build(["a b c", "a b", "c"], min_freq=1)
    net = ChatPriorNet(len(vocab), CFG).eval()
    prior, probs = net.predict_user(vocab, ["a b", "c a"])
    assert prior.shape == (CFG.prior_dim,)
    assert probs.sum().item() == pytest.approx(1.0, abs=1e-6)
    empty, _ = net.predict_user(vocab, [])
    assert empty is net.null_prior


def test_chat_padding_does_not_change_message_prior():
    vocab = Vocabulary.build(["a b c d"], min_freq=1)
    net = ChatPriorNet(len(vocab), CFG).eval()
    alone = net.message_priors(*vocab.batch(["a b"]))
    padded = net.message_priors(*vocab.batch(["a b", "a b c d"]))[:1]
    assert torch.allclose(alone, padded, atol=1e-6)
