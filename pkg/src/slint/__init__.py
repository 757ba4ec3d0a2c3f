"""Knowledge graph completion: TransE candidates re-ranked by a small adapter-tuned language model."""
