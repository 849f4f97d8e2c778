"""Shared record of acceptance-criterion outcomes for the terminal summary."""

DETAILS = {}
OUTCOMES = {}


def note(number, text):
    DETAILS[number] = text
