"""Tests for the level generator"""
