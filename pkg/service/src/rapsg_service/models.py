"""Model-mode engine wrapping pre-trained summarization/generation models.

Assets load eagerly at construction so a misconfigured service fails at
startup, not on the first request. Inference is serialized behind a lock
(one lane); decoding is greedy whenever a seed accompanies the request so
outputs stay reproducible.

Heavy dependencies (torch, transformers) are imported lazily: echo mode
must work on hosts without them.
"""

from __future__ import annotations

import threading


class ModelEngine:
    mode = "model"

    def __init__(self, config):
        try:
            from transformers import pipeline
        except ImportError as exc:
            raise RuntimeError(
                "model mode requires the 'model' extra (torch + transformers)"
            ) from exc
        self._config = config
        self._lock = threading.Lock()
        try:
            self._summarizer = pipeline("summarization", model=config.summarize_model)
            self._generator = pipeline("text-generation", model=config.refine_model)
        except Exception as exc:
            raise RuntimeError(f"failed to load model assets: {exc}") from exc

    def _set_seed(self, seed: int) -> None:
        from transformers import set_seed

        set_seed(seed % (2**32))

    def summarize(self, descriptions, seed, max_tokens):
        text = ". ".join(descriptions)
        with self._lock:
            self._set_seed(seed)
            result = self._summarizer(
                text,
                max_length=self._config.max_new_tokens,
                min_length=1,
                do_sample=False,
                num_beams=self._config.beam_size,
            )
        summary = result[0]["summary_text"].strip()
        return " ".join(summary.split()[:max_tokens])

    def refine(self, prediction, descriptions, seed, max_tokens):
        prompt = self._config.prompt_template.format(
            prediction=prediction, descriptions="; ".join(descriptions)
        )
        with self._lock:
            self._set_seed(seed)
            result = self._generator(
                prompt,
                max_new_tokens=self._config.max_new_tokens,
                do_sample=False,
                num_beams=self._config.beam_size,
                return_full_text=False,
            )
        summary = result[0]["generated_text"].strip()
        return " ".join(summary.split()[:max_tokens]) or prediction
