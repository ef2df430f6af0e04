from neuralquery import (Context, NQLError, OptimizerSpec, QueryParseError, build_kb,
                         build_model, evaluate, fixtures, train)
from neuralquery.fixtures import ROYAL_IN_LAW_QUERY, ROYAL_SEED
from neuralquery.models import Example


def demo_queries(ctx: Context):
    """Demonstrates set constructors, relation calls and query programs."""
    print("\n=== Demo: Queries over the royal family ===\n")

    henry = ctx.one(ROYAL_SEED, "person_t")

    # 1. Relation calls on expressions
    print("--- 1. Relation calls ---")
    for name, weight in henry.wife().eval()[0]:
        print(f"wife: {name} ({weight})")

    # 2. Query text, including multi-line programs
    print("\n--- 2. Query programs ---")
    in_laws = ctx.query(ROYAL_IN_LAW_QUERY).eval()[0]
    print(f"{len(in_laws)} in-laws, e.g. {in_laws[0][0]}")

    # 3. follow() over a soft mix of relations
    print("\n--- 3. Soft relation sets ---")
    mix = ctx.one("father", "rel_t") * 0.75 | ctx.one("mother", "rel_t") * 0.25
    for name, weight in henry.follow(mix).eval()[0]:
        print(f"parent: {name} ({weight})")

    # 4. Errors carry a location in the query text
    print("\n--- 4. Error reporting ---")
    try:
        ctx.query(f"one('{ROYAL_SEED}', person_t).wife(")
    except QueryParseError as e:
        print(e.render())


def demo_training(ctx: Context):
    """Demonstrates learning which relations answer 'maternal grandfather'."""
    print("\n=== Demo: Learning a relation chain ===\n")

    oracle = fixtures.KinshipOracle(fixtures.royal_fixture()[1])
    examples = []
    for person in oracle.persons:
        targets = oracle.chain(person, ["mother", "father"])
        if targets:
            examples.append(Example(person, tuple(sorted(targets))))
    print(f"{len(examples)} training examples")

    model = build_model("template", ctx, "rel_t")
    try:
        result = train(model, examples, OptimizerSpec(kind="adam", lr=0.1), epochs=40,
                       batch_size=len(examples))
        loss, hits = evaluate(model, examples)
        print(f"final loss: {result.final.loss:.4f}  hits@1: {hits:.2f}")
        for i, relations in enumerate(model.learned_relations(), 1):
            top, weight = relations[0]
            print(f"r{i}: {top} ({weight:.3f})")
    except NQLError as e:
        print(f"Training failed: {e}")


def main():
    ctx = Context(build_kb(*fixtures.royal_fixture()))
    demo_queries(ctx)
    print("\n" + "=" * 50 + "\n")
    demo_training(ctx)


if __name__ == "__main__":
    main()
