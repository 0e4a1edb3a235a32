"""Code-ontology lookups and cross-system translation.

Builds a toy diagnosis hierarchy and a drug-code crosswalk, then walks
ancestors, descendants, and translations.
"""

import os
import tempfile

from ehrstream.medcode import ancestors, descendants, load_crossmap, load_ontology, lookup, translate


def main():
    work = tempfile.mkdtemp(prefix="demo-medcode-")

    ontology_csv = os.path.join(work, "dx.csv")
    with open(ontology_csv, "w", encoding="utf-8") as f:
        f.write(
            "code,name,parent\n"
            "ROOT,All diagnoses,\n"
            "C1,Circulatory system,ROOT\n"
            "C11,Hypertensive disease,C1\n"
            "C111,Essential hypertension,C11\n"
            "C2,Endocrine disorders,ROOT\n"
            "C21,Diabetes mellitus,C2\n"
        )
    graph = load_ontology("DX", ontology_csv)
    print(f"loaded {len(graph)} codes")
    print(f"C111 is: {lookup(graph, 'C111')}")
    print(f"ancestors of C111 (nearest first): {ancestors(graph, 'C111')}")
    print(f"descendants of C1: {sorted(descendants(graph, 'C1'))}")
    print(f"unknown code lookup: {lookup(graph, 'NOPE')!r}")

    crossmap_csv = os.path.join(work, "ndc_to_atc.csv")
    with open(crossmap_csv, "w", encoding="utf-8") as f:
        f.write("source,target\nN100,A01AA01\nN100,A01AB02\nN200,B02BC03\n")
    m = load_crossmap("NDC", "ATC", crossmap_csv)
    print(f"\nNDC->ATC map with {m.pair_count} pairs")
    print(f"N100 translates to {sorted(translate(m, 'N100'))}")
    print(f"unmapped code translates to {translate(m, 'N999')}")


if __name__ == "__main__":
    # worker processes use the spawn start method, so the entry point
    # must be import-safe
    main()
