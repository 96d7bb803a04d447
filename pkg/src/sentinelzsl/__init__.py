"""Two-party zero-shot learning without real data exposure.

A data-owner process (the sentinel) holds the real features and a
pretrained teacher; an AI-provider process holds a conditional feature
generator and a student classifier. The provider uploads generated
feature batches over a wire protocol and receives softmax / gradient /
regularizer feedback, never raw data. White-box feedback includes the
classification gradient w.r.t. the uploaded batch; black-box feedback
does not.
"""

__version__ = "0.1.0"
