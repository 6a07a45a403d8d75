"""Plain classifier training used for ancestry networks and baselines."""

from __future__ import annotations

import numpy as np

import learngene.numcore as nc
from learngene.numcore import SeededRng, sgd_step
from learngene.tasks import dense_labels


def evaluate(model, x, y):
    """Eval-mode loss and accuracy on dense labels."""
    with nc.no_grad():
        logits = model.forward(x, train=False)
        loss = float(nc.cross_entropy(logits, y).data)
        pred = np.argmax(logits.data, axis=1)
    return loss, float(np.mean(pred == y))


def train_classifier(model, dataset, epochs, lr, weight_decay=0.0,
                     batch_size=16, seed=0, eval_dataset=None):
    """Seeded minibatch SGD over a class-labelled dataset.

    Returns one row per epoch (epoch 0 is the untrained evaluation) with
    train loss/accuracy and, when given, held-out loss/accuracy.
    """
    y = dense_labels(dataset.labels, dataset.classes)
    y_eval = None
    if eval_dataset is not None:
        if eval_dataset.classes != dataset.classes:
            raise ValueError("eval split must cover the same classes")
        y_eval = dense_labels(eval_dataset.labels, eval_dataset.classes)

    rng = SeededRng(seed).child("train_classifier")
    n = len(dataset)
    history = []

    def record(epoch):
        loss, acc = evaluate(model, dataset.inputs, y)
        row = {"epoch": epoch, "loss": loss, "accuracy": acc}
        if eval_dataset is not None:
            vloss, vacc = evaluate(model, eval_dataset.inputs, y_eval)
            row["eval_loss"], row["eval_accuracy"] = vloss, vacc
        history.append(row)

    record(0)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits = model.forward(dataset.inputs[idx], train=True)
            loss = nc.cross_entropy(logits, y[idx])
            loss.backward()
            sgd_step(model.parameters(), lr=lr, weight_decay=weight_decay)
        record(epoch)
    return history
