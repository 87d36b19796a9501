"""Generate the bundled character corpus (text8-style: lowercase a-z and space).

The output is an original, grammar-generated text released to the public domain
(CC0). It is deterministic for a given seed.
"""
import random
import sys

NOUNS = """king queen farmer river mountain village lantern wizard fox zebra jackal
quilt sailor harbor kettle garden orchard bridge window letter journey
question quarrel oxen lizard jury jewel puzzle maze yard yak owl raven
meadow forest castle tower baker miller soldier captain widow child
horse wagon market storm winter summer candle mirror stone shadow""".split()
VERBS = """saw found carried painted crossed watched followed questioned fixed
quizzed jumped over mixed buried lifted opened closed praised feared
visited guarded admired joined fetched zipped waxed sketched""".split()
ADJS = """old young quiet bright dark heavy quick lazy brave frozen golden
crooked gentle jolly fuzzy vivid wise weary proud silent narrow wide
hazy exact""".split()
ADVS = """slowly quickly quietly gladly never often always boldly calmly
jointly exactly""".split()
PREPS = "near under beside beyond across behind through toward".split()
PLACES = ["the old mill", "the dark wood", "the quiet harbor", "the frozen lake",
          "the market square", "the kings road", "the narrow bridge", "the high tower"]
CONJ = ["and then", "but", "while", "because", "so"]


def noun_phrase(r):
    n = r.choice(NOUNS)
    if r.random() < 0.5:
        return f"the {r.choice(ADJS)} {n}"
    return f"the {n}"


def clause(r):
    s = f"{noun_phrase(r)} {r.choice(VERBS)} {noun_phrase(r)}"
    if r.random() < 0.4:
        s += f" {r.choice(PREPS)} {r.choice(PLACES)}"
    if r.random() < 0.25:
        s += f" {r.choice(ADVS)}"
    return s


def sentence(r):
    s = clause(r)
    if r.random() < 0.35:
        s += f" {r.choice(CONJ)} {clause(r)}"
    return s


def main():
    target = int(sys.argv[1]) if len(sys.argv) > 1 else 100_000
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 1729
    r = random.Random(seed)
    out = []
    size = 0
    while size < target:
        s = sentence(r)
        out.append(s)
        size += len(s) + 1
    text = " ".join(out)[:target]
    sys.stdout.write(text)


if __name__ == "__main__":
    main()
