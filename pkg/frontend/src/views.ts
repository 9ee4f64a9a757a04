// DOM rendering. Pure functions from view state to elements; all numbers
// are rendered verbatim (String(x)) so the page always shows exactly what
// the server sent.

import type { QuizOption } from "./api.js";
import type { SessionView } from "./state.js";

export interface Handlers {
  onSelectImage: (imageId: string) => void;
  onSelectAlt: (cAlt: string) => void;
  onAnswer: (index: number) => void;
  onRetry: () => void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderErrorBanner(view: SessionView, handlers: Handlers): HTMLElement | null {
  if (!view.error) return null;
  const banner = el("div", "error-banner");
  banner.setAttribute("role", "alert");
  banner.appendChild(el("span", "error-message", view.error));
  if (view.retry) {
    const retry = el("button", "retry-button", "Retry");
    retry.addEventListener("click", () => handlers.onRetry());
    banner.appendChild(retry);
  }
  return banner;
}

export function renderImageGrid(view: SessionView, handlers: Handlers): HTMLElement {
  const section = el("section", "image-grid-section");
  section.appendChild(el("h2", undefined, "Pick an image"));
  if (view.images.length === 0) {
    const grid = el("div", "image-grid disabled");
    grid.appendChild(el("p", "empty-message", "No images available."));
    section.appendChild(grid);
    return section;
  }
  const grid = el("div", "image-grid");
  for (const image of view.images) {
    const card = el("button", "image-card");
    card.dataset.imageId = image.id;
    if (image.id === view.currentImage) card.classList.add("selected");
    const thumb = el("div", "thumb");
    thumb.dataset.thumbFor = image.id;
    card.appendChild(thumb);
    card.appendChild(el("div", "image-id", image.id));
    card.appendChild(el("div", "image-pred", image.predicted_class));
    card.addEventListener("click", () => handlers.onSelectImage(image.id));
    grid.appendChild(card);
  }
  section.appendChild(grid);
  return section;
}

export function renderAltsPanel(view: SessionView, handlers: Handlers): HTMLElement | null {
  if (!view.alts) return null;
  const section = el("section", "alts-section");
  section.appendChild(
    el("h2", undefined, `Model says ${view.alts.c_pred}. Flip it to...`),
  );
  const list = el("ul", "alt-list");
  list.setAttribute("role", "listbox");
  view.alts.alternates.forEach((cAlt, i) => {
    const item = el("li");
    const button = el("button", "alt-option", cAlt);
    button.dataset.alt = cAlt;
    button.tabIndex = i === 0 ? 0 : -1;
    button.addEventListener("click", () => handlers.onSelectAlt(cAlt));
    button.addEventListener("keydown", (event) => {
      const buttons = Array.from(
        list.querySelectorAll<HTMLButtonElement>(".alt-option"),
      );
      const idx = buttons.indexOf(button);
      if (event.key === "ArrowDown" && idx + 1 < buttons.length) {
        buttons[idx + 1].focus();
        event.preventDefault();
      } else if (event.key === "ArrowUp" && idx > 0) {
        buttons[idx - 1].focus();
        event.preventDefault();
      }
    });
    item.appendChild(button);
    list.appendChild(item);
  });
  section.appendChild(list);
  return section;
}

function conceptCard(conceptId: string, kind: "add" | "remove",
                     examples: Record<string, string[]>): HTMLElement {
  const card = el("div", `concept-card ${kind}`);
  card.dataset.concept = conceptId;
  card.appendChild(el("span", "card-kind", kind));
  card.appendChild(el("span", "card-name", conceptId));
  const strip = el("div", "examples");
  for (const imageId of examples[conceptId] ?? []) {
    const thumb = el("div", "thumb small");
    thumb.dataset.thumbFor = imageId;
    thumb.title = imageId;
    strip.appendChild(thumb);
  }
  card.appendChild(strip);
  return card;
}

export function renderFaultline(view: SessionView): HTMLElement | null {
  if (!view.faultline) return null;
  const { bundle } = view.faultline;
  const section = el("section", "faultline-section");
  section.appendChild(
    el(
      "h2",
      undefined,
      `Fault-line: ${bundle.query.c_pred} to ${bundle.query.c_alt}`,
    ),
  );
  if (!bundle.flipped) {
    const ribbon = el(
      "div",
      "caveat-ribbon",
      "No concept change over these sets flips the decision; showing the best attempt.",
    );
    ribbon.setAttribute("role", "note");
    section.appendChild(ribbon);
  }
  const cards = el("div", "concept-cards");
  for (const conceptId of bundle.pft) {
    cards.appendChild(conceptCard(conceptId, "add", bundle.concept_examples));
  }
  for (const conceptId of bundle.nft) {
    cards.appendChild(conceptCard(conceptId, "remove", bundle.concept_examples));
  }
  section.appendChild(cards);
  const margin = el("div", "margin");
  margin.appendChild(el("span", undefined, "margin "));
  margin.appendChild(el("span", "margin-value", String(bundle.margin)));
  section.appendChild(margin);
  return section;
}

export function renderQuiz(view: SessionView, handlers: Handlers): HTMLElement | null {
  const quiz = view.faultline?.quiz;
  if (!quiz) return null;
  const section = el("section", "quiz-section");
  section.appendChild(el("h2", undefined, "Check your understanding"));
  section.appendChild(el("p", "quiz-prompt", quiz.prompt));
  const options = el("div", "quiz-options");
  quiz.options.forEach((option: QuizOption, index: number) => {
    const label =
      `add [${option.add.join(", ")}] / remove [${option.remove.join(", ")}]`;
    const button = el("button", "quiz-option", label);
    button.dataset.optionIndex = String(index);
    button.disabled = view.quizSubmitted || view.busy;
    button.addEventListener("click", () => handlers.onAnswer(index));
    options.appendChild(button);
  });
  section.appendChild(options);
  if (view.quizResult) {
    const result = el(
      "div",
      `quiz-result ${view.quizResult.correct ? "correct" : "incorrect"}`,
    );
    result.appendChild(
      el("span", "verdict", view.quizResult.correct ? "Correct" : "Incorrect"),
    );
    result.appendChild(el("span", undefined, " reward "));
    result.appendChild(el("span", "reward-value", String(view.quizResult.reward)));
    result.appendChild(el("p", "next-prompt", view.quizResult.next_prompt));
    section.appendChild(result);
  }
  return section;
}

export function renderTrustDashboard(view: SessionView): HTMLElement | null {
  if (!view.trust) return null;
  const section = el("section", "trust-section");
  section.appendChild(el("h2", undefined, "Trust dashboard"));
  const tiles = el("div", "trust-tiles");
  const entries: Array<[string, number]> = [
    ["jpt", view.trust.jpt],
    ["jnt", view.trust.jnt],
    ["reliance", view.trust.reliance],
    ["jt_classification", view.trust.jt_classification],
  ];
  for (const [name, value] of entries) {
    const tile = el("div", "trust-tile");
    tile.dataset.metric = name;
    tile.appendChild(el("div", "tile-name", name));
    tile.appendChild(el("div", "tile-value", String(value)));
    tiles.appendChild(tile);
  }
  section.appendChild(tiles);
  return section;
}

export function render(root: HTMLElement, view: SessionView, handlers: Handlers): void {
  root.textContent = "";
  const header = el("header");
  header.appendChild(el("h1", undefined, "Fault-line explanation dialog"));
  if (view.sessionId) {
    const token = el("div", "session-token", view.sessionId);
    token.dataset.sessionId = view.sessionId;
    header.appendChild(token);
  }
  root.appendChild(header);
  const banner = renderErrorBanner(view, handlers);
  if (banner) root.appendChild(banner);
  for (const section of [
    renderImageGrid(view, handlers),
    renderAltsPanel(view, handlers),
    renderFaultline(view),
    renderQuiz(view, handlers),
    renderTrustDashboard(view),
  ]) {
    if (section) root.appendChild(section);
  }
}
