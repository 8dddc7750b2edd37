"""Multimodal (video, audio, chat) gaming-skill classification."""
