"""Joint training of an answer-selection model and a question-generation
model, coupled through the identity P(a)P(q|a) = P(q)P(a|q)."""

__version__ = "0.1.0"
