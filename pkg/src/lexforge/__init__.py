"""Legal-domain BERT pre-training, hierarchical fine-tuning and attention explainability in numpy."""

__version__ = "0.1.0"
