"""Koos grading of vestibular schwannoma from brain-structure label volumes."""
