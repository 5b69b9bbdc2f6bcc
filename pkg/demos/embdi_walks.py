"""Look inside the EmbDi baseline: the token / row-id / column-id graph and
the random walks that become its word2vec corpus.

    python demos/embdi_walks.py
"""

from reltab.baselines import SkipGramConfig, WalkConfig, build_tripartite_graph, random_walk_corpus, train_skipgram
from reltab.baselines import walks_to_sentences
from reltab.synthetic import mini_imdb


def main() -> None:
    db = mini_imdb(seed=0).database()
    graph = build_tripartite_graph(db)
    for name, n in graph.counts().items():
        print(f"{name:>16}: {n}")

    walks = random_walk_corpus(graph, WalkConfig(walks_per_entity=50, walk_length=20, seed=0))
    print(f"\n{len(walks)} walks of length {walks.shape[1]}; two examples:")
    for sent in walks_to_sentences(graph, walks[:2]):
        print("  " + " ".join(sent[:7]) + " ...")

    model = train_skipgram(walks_to_sentences(graph, walks[::10]), SkipGramConfig(dim=32, epochs=1, window=5))
    genre = "tok:movies_genres.genre.3"
    vec = model.vector(genre)
    sims = model.w_in @ vec / ((model.w_in ** 2).sum(1) ** 0.5 * (vec @ vec) ** 0.5)
    top = [model.labels[i] for i in sims.argsort()[::-1][1:6]]
    print(f"\nnearest nodes to {genre} ({db.vocab('movies_genres', 'genre').decode(3)}): {top}")


if __name__ == "__main__":
    main()
