"""Generate the bundled desk-scale corpus under crates/core/data/corpus.

The text is produced by a small seeded grammar so the repository ships a
deterministic ~100 KB corpus without any download.
"""

import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "data" / "corpus"

TOWNS = ["ashford", "brindle", "corwen", "dunmore", "elmstead", "farrow", "glenbrook",
         "harlow", "ivybridge", "kelso", "larkhill", "millbrook", "northam", "oakridge"]
RIVERS = ["the avon", "the tamar", "the wye", "the severn", "the ouse", "the trent", "the esk"]
ANIMALS = ["fox", "badger", "heron", "otter", "owl", "hare", "deer", "kingfisher", "weasel", "swan"]
PEOPLE = ["the miller", "the baker", "the teacher", "the doctor", "the farmer", "the mayor",
          "the sailor", "the painter", "the smith", "the clerk", "the weaver", "the keeper"]
OBJECTS = ["bridge", "mill", "church", "school", "market", "harbour", "library", "tower",
           "station", "garden", "bakery", "museum", "lighthouse", "orchard"]
ADJ = ["old", "small", "quiet", "busy", "ancient", "narrow", "famous", "wooden", "stone",
       "bright", "cold", "green", "tall", "gentle"]
SEASONS = ["spring", "summer", "autumn", "winter"]
VERBS_T = ["built", "painted", "repaired", "visited", "closed", "opened", "cleaned", "sold",
           "restored", "guarded"]
VERBS_I = ["sleeps", "hunts", "waits", "sings", "rests", "wanders", "swims", "watches"]
YEARS = [str(y) for y in range(1780, 1960, 7)]
NUMBERS = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "twelve"]
MACHINES = ["engine", "pump", "loom", "clock", "press", "crane", "lamp", "wheel"]


def pick(rng, xs):
    return rng.choice(xs)


def sentence(rng, town):
    t = rng.randrange(16)
    if t == 0:
        return f"{town} is a {pick(rng, ADJ)} town on the banks of {pick(rng, RIVERS)}."
    if t == 1:
        return f"the {pick(rng, ADJ)} {pick(rng, OBJECTS)} was {pick(rng, VERBS_T)} in {pick(rng, YEARS)}."
    if t == 2:
        return f"{pick(rng, PEOPLE)} {pick(rng, VERBS_T)} the {pick(rng, OBJECTS)} near the {pick(rng, OBJECTS)}."
    if t == 3:
        return f"in {pick(rng, SEASONS)} the {pick(rng, ANIMALS)} {pick(rng, VERBS_I)} by the water."
    if t == 4:
        return f"the town has {pick(rng, NUMBERS)} {pick(rng, OBJECTS)}s and one {pick(rng, ADJ)} {pick(rng, OBJECTS)}."
    if t == 5:
        return f"who {pick(rng, VERBS_T)} the {pick(rng, OBJECTS)} of {town}?"
    if t == 6:
        return f"nobody knows why the {pick(rng, MACHINES)} stopped in {pick(rng, YEARS)}!"
    if t == 7:
        return (f"after the war, {pick(rng, PEOPLE)} and {pick(rng, PEOPLE)} "
                f"{pick(rng, VERBS_T)} the {pick(rng, MACHINES)} at the {pick(rng, OBJECTS)}.")
    if t == 8:
        return f"the {pick(rng, ANIMALS)} is often seen in the {pick(rng, ADJ)} {pick(rng, OBJECTS)} at night."
    if t == 9:
        return f"every {pick(rng, SEASONS)}, people from {pick(rng, TOWNS)} come to the {pick(rng, OBJECTS)}."
    if t == 10:
        return f"the {pick(rng, MACHINES)} in the {pick(rng, OBJECTS)} still works after {pick(rng, NUMBERS)} years."
    if t == 11:
        return f"is the {pick(rng, ADJ)} {pick(rng, OBJECTS)} older than the {pick(rng, OBJECTS)}?"
    if t == 12:
        return (f"{pick(rng, PEOPLE)} said that the {pick(rng, ANIMALS)} and the "
                f"{pick(rng, ANIMALS)} live near {pick(rng, RIVERS)}.")
    if t == 13:
        return f"the road from {town} to {pick(rng, TOWNS)} crosses {pick(rng, RIVERS)} twice."
    if t == 14:
        return f"what a {pick(rng, ADJ)} {pick(rng, SEASONS)} it was in {town}!"
    return f"the {pick(rng, OBJECTS)} of {town} was {pick(rng, VERBS_T)} by {pick(rng, PEOPLE)}."


def article(rng, town):
    paras = []
    for _ in range(rng.randint(3, 6)):
        paras.append(" ".join(sentence(rng, town) for _ in range(rng.randint(3, 7))))
    return f"{town}\n" + "\n".join(paras) + "\n"


def main():
    rng = random.Random(20240611)
    OUT.mkdir(parents=True, exist_ok=True)
    total = 0
    idx = 0
    while total < 100_000:
        town = TOWNS[idx % len(TOWNS)]
        text = "\n".join(article(rng, town) for _ in range(4))
        path = OUT / f"part_{idx:02d}.txt"
        path.write_text(text, encoding="utf-8")
        total += len(text.encode("utf-8"))
        idx += 1
    print(f"wrote {idx} files, {total} bytes")


if __name__ == "__main__":
    main()
