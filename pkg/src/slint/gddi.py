"""Prompt construction, token-level injection and the adapter-tuned tiny LM."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .data import Direction, KnowledgeGraph, Query, Triple
from .kge import CandidateList
from .numerics import DTYPE

PAD, UNK, CLS, EOS, QUERY, ENTITY = "[PAD]", "[UNK]", "[CLS]", "[EOS]", "[QUERY]", "[ENTITY]"
SPECIAL_TOKENS = (PAD, UNK, CLS, EOS, QUERY, ENTITY)
IGNORE = -100


# --------------------------------------------------------------------------- prompts


@dataclass
class Prompt:
    query_text: str
    description: str
    neighbor_triples: list[str]
    candidates: list[str]
    k_r: int
    candidate_ids: list[int] = field(default_factory=list)
    gold: str | None = None

    def segments(self) -> list[str]:
        out = [f"query : {self.query_text}"]
        if self.description:
            out.append(f"description : {self.description}")
        if self.neighbor_triples:
            out.append("neighbors : " + " ; ".join(self.neighbor_triples))
        cands = [f"{ENTITY} {c}" if i < self.k_r else c for i, c in enumerate(self.candidates)]
        out.append("candidates : " + " , ".join(cands))
        out.append("answer :")
        return out

    def text(self) -> str:
        return " ".join(self.segments())


def verbalize_query(q: Query, kg: KnowledgeGraph) -> str:
    known = kg.entities.name(q.known)
    rel = kg.relations.name(q.rel)
    if q.direction is Direction.TAIL:
        return f"{QUERY} ( {known} , {rel} , ? )"
    return f"{QUERY} ( ? , {rel} , {known} )"


def build_prompt(q: Query, kg: KnowledgeGraph, cands: CandidateList, neighbors: Sequence[Triple], k_r: int = 1) -> Prompt:
    """Concatenate query, description, neighbour facts and candidates, with injection markers."""
    if not cands.ids:
        raise ValueError("prompt needs at least one candidate")
    if k_r > len(cands.ids):
        raise ValueError(f"k_r={k_r} exceeds the {len(cands.ids)} available candidates")
    return Prompt(
        query_text=verbalize_query(q, kg),
        description=kg.description(q.known),
        neighbor_triples=[kg.verbalize(t) for t in neighbors],
        candidates=[kg.entities.name(e) for e in cands.ids],
        k_r=k_r,
        candidate_ids=list(cands.ids),
        gold=kg.entities.name(q.gold),
    )


# --------------------------------------------------------------------------- tokenizer


class WordVocab:
    """Whitespace tokenizer with reserved marker ids and an UNK fallback."""

    def __init__(self, words: Iterable[str]):
        self.itos = list(SPECIAL_TOKENS)
        for w in words:
            if w not in SPECIAL_TOKENS:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def build(cls, texts: Iterable[str], cap: int = 8192) -> "WordVocab":
        counts = Counter(w for t in texts for w in t.split())
        for s in SPECIAL_TOKENS:
            counts.pop(s, None)
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ranked[: max(0, cap - len(SPECIAL_TOKENS))])

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)


@dataclass
class TokenizedPrompt:
    token_ids: list[int]
    query_pos: int
    entity_pos: list[int]
    target_ids: list[int]


def tokenize(p: Prompt, vocab: WordVocab) -> TokenizedPrompt:
    ids = [vocab.stoi[CLS]] + vocab.encode(p.text())
    q_id, e_id = vocab.stoi[QUERY], vocab.stoi[ENTITY]
    query_pos = ids.index(q_id)
    entity_pos = [i for i, t in enumerate(ids) if t == e_id]
    target = (vocab.encode(p.gold) if p.gold is not None else []) + [vocab.stoi[EOS]]
    return TokenizedPrompt(ids, query_pos, entity_pos, target)


def detokenize(tp: TokenizedPrompt, vocab: WordVocab) -> str:
    ids = tp.token_ids[1:] if tp.token_ids and tp.token_ids[0] == vocab.stoi[CLS] else tp.token_ids
    return vocab.decode(ids)


def corpus_texts(kg: KnowledgeGraph) -> list[str]:
    """Text the word vocabulary is built from: train facts, all names, descriptions, templates."""
    texts = [kg.verbalize(t) for t in kg.train]
    texts += kg.entities.names + kg.relations.names
    texts += list(kg.descriptions.values())
    texts.append("query : description : neighbors : ; candidates : answer : ( ? , )")
    return texts


def answer_texts(kg: KnowledgeGraph, triples: Iterable[Triple]) -> list[str]:
    """Verbalized facts in both query directions, used to pretrain the base LM."""
    out = []
    for t in triples:
        h, r, tl = kg.entities.name(t.head), kg.relations.name(t.rel), kg.entities.name(t.tail)
        out.append(f"( {h} , {r} , ? ) answer : {tl}")
        out.append(f"( ? , {r} , {tl} ) answer : {h}")
    return out


# --------------------------------------------------------------------------- model


class LoRALinear(nn.Module):
    """Frozen linear map plus a trainable low-rank update ``(alpha / r) * B @ A``."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float, generator: torch.Generator):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(
            torch.randn(rank, base.in_features, generator=generator, dtype=DTYPE) / math.sqrt(base.in_features)
        )
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=DTYPE))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * (self.dropout(x) @ self.lora_A.T @ self.lora_B.T)


class CausalSelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width, dtype=DTYPE)
        self.k = nn.Linear(width, width, dtype=DTYPE)
        self.v = nn.Linear(width, width, dtype=DTYPE)
        self.o = nn.Linear(width, width, dtype=DTYPE)

    def forward(self, x: torch.Tensor, past: tuple | None = None):
        """Causal attention; ``past`` holds (k, v) of a shared prefix of batch size 1."""
        B, L, h = x.shape
        dh = h // self.heads

        def split(t):
            return t.view(B, L, self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        present = (k, v)
        if past is None:
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            pk, pv = past
            P = pk.shape[2]
            k = torch.cat([pk.expand(B, -1, -1, -1), k], dim=2)
            v = torch.cat([pv.expand(B, -1, -1, -1), v], dim=2)
            allowed = torch.ones(L, P + L, dtype=torch.bool)
            allowed[:, P:] = torch.ones(L, L, dtype=torch.bool).tril()
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
        return self.o(y.transpose(1, 2).reshape(B, L, h)), present


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width, dtype=DTYPE)
        self.attn = CausalSelfAttention(width, heads)
        self.ln2 = nn.LayerNorm(width, dtype=DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width, dtype=DTYPE), nn.GELU(), nn.Linear(4 * width, width, dtype=DTYPE)
        )

    def forward(self, x, past=None):
        a, present = self.attn(self.ln1(x), past)
        x = x + a
        return x + self.mlp(self.ln2(x)), present


@dataclass
class LMConfig:
    width: int = 64
    layers: int = 2
    heads: int = 4
    context: int = 256
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    tie_embeddings: bool = True
    seed: int = 0


class TinyLM(nn.Module):
    """Decoder-only transformer that consumes precomputed input embeddings.

    Call :meth:`add_adapters` after pretraining: it freezes every base weight and
    wraps the attention query/value maps with :class:`LoRALinear`.
    """

    def __init__(self, vocab: WordVocab, cfg: LMConfig = LMConfig()):
        super().__init__()
        self.vocab = vocab
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self.tok_emb = nn.Embedding(len(vocab), cfg.width, dtype=DTYPE)
            self.pos_emb = nn.Embedding(cfg.context, cfg.width, dtype=DTYPE)
            nn.init.normal_(self.tok_emb.weight, std=0.3)
            nn.init.normal_(self.pos_emb.weight, std=0.1)
            self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads) for _ in range(cfg.layers))
            self.ln_f = nn.LayerNorm(cfg.width, dtype=DTYPE)
            self.head = nn.Linear(cfg.width, len(vocab), dtype=DTYPE)
            if cfg.tie_embeddings:
                self.head.weight = self.tok_emb.weight
        self.has_adapters = False
        self.frozen_hash: str | None = None

    @property
    def width(self) -> int:
        return self.cfg.width

    def seed_token_embeddings(self, rows: dict[int, torch.Tensor]) -> None:
        """Overwrite selected token embedding rows (e.g. from structural vectors)."""
        with torch.no_grad():
            for tid, vec in rows.items():
                self.tok_emb.weight[tid] = vec

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(torch.as_tensor(token_ids, dtype=torch.long))

    def forward(self, inputs: torch.Tensor, past: list | None = None, return_past: bool = False):
        """Logits for input embeddings of shape (B, L, width) or (L, width).

        ``past`` is the per-layer cache returned by an earlier call with
        ``return_past=True`` on a single prefix sequence; ``inputs`` then continue it.
        """
        squeeze = inputs.dim() == 2
        x = inputs.unsqueeze(0) if squeeze else inputs
        offset = 0 if past is None else past[0][0].shape[2]
        L = x.shape[1]
        if offset + L > self.cfg.context:
            raise ValueError(f"sequence length {offset + L} exceeds context {self.cfg.context}")
        x = x + self.pos_emb.weight[offset:offset + L]
        presents = []
        for i, block in enumerate(self.blocks):
            x, present = block(x, None if past is None else past[i])
            presents.append(present)
        logits = self.head(self.ln_f(x))
        if squeeze:
            logits = logits[0]
        return (logits, presents) if return_past else logits

    def add_adapters(self) -> None:
        if self.has_adapters:
            return
        for p in self.parameters():
            p.requires_grad_(False)
        g = torch.Generator().manual_seed(self.cfg.seed + 17)
        c = self.cfg
        for block in self.blocks:
            block.attn.q = LoRALinear(block.attn.q, c.lora_rank, c.lora_alpha, c.lora_dropout, g)
            block.attn.v = LoRALinear(block.attn.v, c.lora_rank, c.lora_alpha, c.lora_dropout, g)
        self.has_adapters = True
        self.frozen_hash = self.base_hash()

    def adapter_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if "lora_" in n]

    def base_named_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n.replace(".base.", "."), p) for n, p in self.named_parameters() if "lora_" not in n]

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.base_named_parameters()):
            h.update(name.encode())
            h.update(p.detach().contiguous().numpy().tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------- injection and losses


def inject(tp: TokenizedPrompt, lm: TinyLM, q_enh, ent_enh: Sequence = (), extra_ids: Sequence[int] = ()) -> torch.Tensor:
    """Token embeddings of ``tp`` (plus ``extra_ids``) with marker rows overwritten.

    ``q_enh`` replaces the QUERY row and ``ent_enh[i]`` the i-th ENTITY row;
    pass ``q_enh=None`` to skip injection entirely.
    """
    ids = torch.tensor(list(tp.token_ids) + list(extra_ids), dtype=torch.long)
    emb = lm.embed(ids)
    if q_enh is None:
        return emb
    q = torch.as_tensor(getattr(q_enh, "vec", q_enh), dtype=DTYPE)
    ents = [torch.as_tensor(getattr(e, "vec", e), dtype=DTYPE) for e in ent_enh]
    if len(ents) != len(tp.entity_pos):
        raise ValueError(f"{len(tp.entity_pos)} ENTITY markers but {len(ents)} vectors")
    if q.shape[-1] != lm.width or any(e.shape[-1] != lm.width for e in ents):
        raise ValueError(f"injected vectors must have width {lm.width}")
    pos = torch.tensor([tp.query_pos] + list(tp.entity_pos), dtype=torch.long)
    vals = torch.stack([q] + ents)
    return emb.index_put((pos,), vals)


def teacher_forcing_labels(prompt_len: int, target_ids: Sequence[int]) -> torch.Tensor:
    """Next-token labels for ``prompt + target``; prompt positions are ignored."""
    L = prompt_len + len(target_ids)
    labels = torch.full((L,), IGNORE, dtype=torch.long)
    labels[prompt_len - 1 : L - 1] = torch.tensor(list(target_ids), dtype=torch.long)
    return labels


def pad_batch(seqs: Sequence[torch.Tensor], labels: Sequence[torch.Tensor], pad_vec: torch.Tensor):
    """Right-pad embedding sequences; padded positions get IGNORE labels."""
    L = max(s.shape[0] for s in seqs)
    out_x, out_y = [], []
    for s, y in zip(seqs, labels):
        extra = L - s.shape[0]
        if extra:
            s = torch.cat([s, pad_vec.expand(extra, -1)])
            y = torch.cat([y, torch.full((extra,), IGNORE, dtype=torch.long)])
        out_x.append(s)
        out_y.append(y)
    return torch.stack(out_x), torch.stack(out_y)


def lm_loss(lm: TinyLM, inputs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean causal NLL over labelled (target) positions."""
    logits = lm(inputs)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE)


def sequence_logprobs(lm: TinyLM, inputs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Length-normalised log-likelihood of the labelled positions, one value per row."""
    logits = lm(inputs)
    logp = torch.log_softmax(logits, dim=-1)
    mask = labels != IGNORE
    picked = logp.gather(-1, labels.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return (picked * mask).sum(-1) / mask.sum(-1)


def score_candidates(lm: TinyLM, tp: TokenizedPrompt, q_enh, ent_enh, names: Sequence[str]) -> list[float]:
    """Teacher-forced, length-normalised log-likelihood of each candidate name (+ EOS).

    The prompt is encoded once; candidates continue it from the cached keys/values.
    """
    vocab = lm.vocab
    eos = vocab.stoi[EOS]
    targets = [vocab.encode(name) + [eos] for name in names]
    with torch.no_grad():
        prompt = inject(tp, lm, q_enh, ent_enh)
        logits, past = lm(prompt.unsqueeze(0), return_past=True)
        first = torch.log_softmax(logits[0, -1], dim=-1)
        width = max(len(t) for t in targets)
        ids = torch.full((len(targets), width), vocab.stoi[PAD], dtype=torch.long)
        for i, t in enumerate(targets):
            ids[i, : len(t)] = torch.tensor(t)
        cont = torch.log_softmax(lm(lm.embed(ids), past=past), dim=-1)
    scores = []
    for i, t in enumerate(targets):
        total = first[t[0]].item()
        for j in range(1, len(t)):
            total += cont[i, j - 1, t[j]].item()
        scores.append(total / len(t))
    return scores


def score_candidates_full(lm: TinyLM, tp: TokenizedPrompt, q_enh, ent_enh, names: Sequence[str]) -> list[float]:
    """Reference implementation of :func:`score_candidates` without the prefix cache."""
    vocab = lm.vocab
    eos = vocab.stoi[EOS]
    seqs, labels = [], []
    for name in names:
        target = vocab.encode(name) + [eos]
        seqs.append(inject(tp, lm, q_enh, ent_enh, extra_ids=target))
        labels.append(teacher_forcing_labels(len(tp.token_ids), target))
    x, y = pad_batch(seqs, labels, lm.embed([vocab.stoi[PAD]])[0])
    with torch.no_grad():
        return sequence_logprobs(lm, x, y).tolist()


def score_candidate(lm: TinyLM, tp: TokenizedPrompt, q_enh, ent_enh, name: str) -> float:
    return score_candidates(lm, tp, q_enh, ent_enh, [name])[0]


def alignment_kl(lm: TinyLM, plain_input: torch.Tensor, injected_input: torch.Tensor) -> torch.Tensor:
    """Mean per-position KL(p_plain || p_injected) of next-token distributions."""
    if plain_input.shape != injected_input.shape:
        raise ValueError("plain and injected inputs must have the same shape")
    lp = torch.log_softmax(lm(plain_input), dim=-1)
    lq = torch.log_softmax(lm(injected_input), dim=-1)
    kl = (lp.exp() * (lp - lq)).sum(-1)
    return kl.mean().clamp(min=0.0)
