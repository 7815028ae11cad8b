"""Path of Destruction level generator"""
