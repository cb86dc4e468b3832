"""Speaker-adaptive features: LDA, flat GMM, fMLLR transforms, x-vectors."""
