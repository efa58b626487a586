"""Tests for dreaming-of-a-jet-plane application"""
