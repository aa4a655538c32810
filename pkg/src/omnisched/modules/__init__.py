"""omnisched analysis modules: pipeline, memory, attention windows and reliability."""
