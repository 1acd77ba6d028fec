"""Hugging Face causal-LM backend (BLOOM, LLaMA and look-alikes).

States are read with forward pre-hooks on the transformer blocks (the input
to block ``k`` is ``h_k``) and a forward hook on the last block (``h_N``,
before the final norm).  Intervening at layer ``n`` swaps the final-position
row of block ``n``'s input.
"""
from __future__ import annotations

import hashlib
import logging

import numpy as np
import torch

from .base import Backend, ModelInfo

logger = logging.getLogger(__name__)


class _Stop(Exception):
    pass


def _locate(model):
    base = model.base_model
    for blocks_attr, norm_attr in (("h", "ln_f"), ("layers", "norm"), ("layers", "final_layernorm")):
        if hasattr(base, blocks_attr) and hasattr(base, norm_attr):
            return getattr(base, blocks_attr), getattr(base, norm_attr)
    raise TypeError(f"unsupported architecture {type(model).__name__}: cannot find blocks/final norm")


class HFBackend(Backend):
    def __init__(self, model, tokenizer, name: str | None = None, languages=frozenset(),
                 add_special_tokens: bool | None = None):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.blocks, self.final_norm = _locate(model)
        self.unembed = model.get_output_embeddings()
        self.eos_token_id = tokenizer.eos_token_id
        # LLaMA-style tokenizers prepend BOS; BLOOM does not add anything.
        self.add_special_tokens = True if add_special_tokens is None else add_special_tokens
        cfg = model.config
        self.info = ModelInfo(
            name or getattr(cfg, "_name_or_path", None) or type(model).__name__,
            len(self.blocks), cfg.hidden_size, self.unembed.out_features, frozenset(languages),
            getattr(cfg, "max_position_embeddings", None) or getattr(cfg, "seq_length", None),
        )
        self._device = next(model.parameters()).device
        self._dtype = next(model.parameters()).dtype

    @classmethod
    def from_pretrained(cls, model_id: str, name: str | None = None, languages=frozenset(),
                        dtype=torch.float32, device: str | None = None):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tok = AutoTokenizer.from_pretrained(model_id)
        model = AutoModelForCausalLM.from_pretrained(model_id, dtype=dtype)
        if device:
            model = model.to(device)
        return cls(model, tok, name=name or model_id, languages=languages)

    def fingerprint(self):
        h = hashlib.sha256(f"{self.info.name}/{self.info.num_layers}/{self.info.hidden_size}".encode())
        # a few weight slices identify the checkpoint cheaply
        for p in list(self.model.parameters())[:3]:
            h.update(p.detach().flatten()[:256].double().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    def encode(self, text):
        ids = self.tokenizer.encode(text, add_special_tokens=self.add_special_tokens)
        return list(ids)

    def decode(self, token_ids):
        return self.tokenizer.decode(list(token_ids), skip_special_tokens=True)

    def answer_ids(self, text: str) -> list[int]:
        """Token ids of ``text`` as a continuation (no special tokens)."""
        return list(self.tokenizer.encode(text, add_special_tokens=False))

    def _input(self, token_ids):
        return torch.tensor([list(token_ids)], device=self._device)

    @staticmethod
    def _hidden(args, kwargs):
        return args[0] if args else kwargs["hidden_states"]

    @staticmethod
    def _out(output):
        return output[0] if isinstance(output, tuple) else output

    def _run(self, token_ids, pre_hooks=(), post_hooks=()):
        handles = [self.blocks[i].register_forward_pre_hook(fn, with_kwargs=True) for i, fn in pre_hooks]
        handles += [self.blocks[i].register_forward_hook(fn) for i, fn in post_hooks]
        try:
            self.model(self._input(token_ids), use_cache=False)
        except _Stop:
            pass
        finally:
            for h in handles:
                h.remove()

    @torch.no_grad()
    def layer_states(self, token_ids, upto=None):
        N = self.info.num_layers
        upto = N if upto is None else upto
        captured: dict[int, torch.Tensor] = {}

        def pre(k):
            def fn(mod, args, kwargs):
                captured[k] = self._hidden(args, kwargs)[0, -1].detach().clone()
                if k == upto:
                    raise _Stop
            return fn

        def post(mod, args, output):
            captured[N] = self._out(output)[0, -1].detach().clone()

        self._run(token_ids, [(k, pre(k)) for k in range(min(upto + 1, N))],
                  [(N - 1, post)] if upto == N else [])
        return torch.stack([captured[k] for k in range(upto + 1)]).double().cpu().numpy()

    def _inject_forward(self, token_ids, n, h_n: torch.Tensor) -> torch.Tensor:
        N = self.info.num_layers
        result = {}

        def swap(mod, args, kwargs):
            hidden = self._hidden(args, kwargs)
            mask = torch.zeros_like(hidden)
            mask[0, -1] = 1
            hidden = hidden * (1 - mask) + mask * h_n.to(hidden.dtype)
            if args:
                return (hidden, *args[1:]), kwargs
            return args, {**kwargs, "hidden_states": hidden}

        def post(mod, args, output):
            result["h"] = self._out(output)[0, -1]
            raise _Stop

        self._run(token_ids, [(n, swap)], [(N - 1, post)])
        return result["h"]

    def run_from(self, token_ids, n, h_n):
        with torch.no_grad():
            h = torch.as_tensor(np.asarray(h_n), dtype=self._dtype, device=self._device)
            return self._inject_forward(token_ids, n, h).double().cpu().numpy()

    def _jacobian(self, token_ids, n, h_n):
        h = torch.as_tensor(np.asarray(h_n), dtype=self._dtype, device=self._device)
        with torch.enable_grad():
            J = torch.autograd.functional.jacobian(lambda v: self._inject_forward(token_ids, n, v), h,
                                                   vectorize=True)
        return J.double().cpu().numpy()

    @torch.no_grad()
    def readout(self, states):
        h = torch.as_tensor(np.asarray(states), dtype=self._dtype, device=self._device)
        return self.unembed(self.final_norm(h)).double().cpu().numpy()

    @torch.no_grad()
    def greedy_generate(self, prompt, max_tokens=16):
        past = {"kv": None}

        def next_token(ids):
            # incremental decoding with the KV cache; ids only ever grow by one
            if past["kv"] is None:
                out = self.model(self._input(ids), use_cache=True)
            else:
                out = self.model(self._input(ids[-1:]), past_key_values=past["kv"], use_cache=True)
            past["kv"] = out.past_key_values
            return int(out.logits[0, -1].argmax())

        return self.decode_loop(prompt, max_tokens, next_token)
