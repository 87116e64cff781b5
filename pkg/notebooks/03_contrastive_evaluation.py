"""
Contrastive disambiguation and its text-only floor
==================================================

Each contrastive item is one ambiguous sentence, two candidate
translations and two images.  A model that ignores the image gives the same
ranking under both images and so is right exactly half the time.
"""

import numpy as np

from guidedmt import ModelConfig, MultimodalTransformer, SyntheticSpec, contrastive_evaluate, generate_synthetic_corpus
from guidedmt.evaluation import corpus_bleu, perplexity

corpus = generate_synthetic_corpus(SyntheticSpec(n_parallel=310, n_monolingual=10, n_text=10, n_dev=2),
                                   np.random.default_rng(1))
item = corpus.contrastive[0]
print(item.source, "|", item.translation_a, "|", item.translation_b, "|", item.pairing)

cfg = ModelConfig(vocab_size=len(corpus.vocab), n_local_features=3)
model = MultimodalTransformer.initialize(cfg, seed=1)

###############################################################################
# Text-only mode drops every visual position: exactly 50%, no ties.

print(contrastive_evaluate(corpus.contrastive, model, corpus.vocab, mode="text-only").summary())

###############################################################################
# The key file tells an oracle which sense each image shows.  Scoring with it
# gives 100%.

key = {k["id"]: k["correct"] for k in corpus.key}


def oracle(source, translation, image):
    it = next(i for i in corpus.contrastive if i.source == source and translation in (i.translation_a, i.translation_b))
    which = "image_1" if image is it.image_1 else "image_2"
    return [0.0] if it.translation(key[it.example_id][which]) == translation else [-1.0]


print(contrastive_evaluate(corpus.contrastive[:20], oracle).summary())

###############################################################################
# The two metrics underneath: perplexity of a per-token log-probability list
# and corpus BLEU.

print(perplexity(np.log([0.5, 0.25, 0.125])))
print(corpus_bleu(["the cat sat on the mat"], ["the cat sat on a mat"]))
