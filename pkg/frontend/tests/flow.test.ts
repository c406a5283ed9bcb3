import { beforeEach, describe, expect, it, vi } from "vitest";

import { ApiError, QuizApi } from "../src/api.js";
import { QuizFlow } from "../src/flow.js";

function stubApi(overrides: Partial<Record<keyof QuizApi, unknown>> = {}) {
  const mastery = [
    { skill_id: "30", name: "Fractions", value: 0.5 },
    { skill_id: "31", name: "Decimals", value: 0.5 },
  ];
  const api = {
    createSession: vi.fn(async () => ({
      session_id: "s1",
      student_id: "fresh",
      status: "active",
      budget: 2,
      step: 0,
      steps_remaining: 2,
      pending_item: null,
      mastery: structuredClone(mastery),
    })),
    nextItem: vi.fn(async () => ({
      item_id: "900",
      text: "Solve it.",
      knowledge: ["Fractions"],
      step: 0,
      steps_remaining: 2,
    })),
    submitResponse: vi.fn(async () => ({
      mastery_deltas: [
        { skill_id: "30", name: "Fractions", before: 0.5, after: 0.61 },
      ],
      steps_remaining: 1,
      status: "active",
    })),
    getMastery: vi.fn(async () => ({ mastery: structuredClone(mastery) })),
    getFeedback: vi.fn(async () => ({
      student_id: "fresh",
      provider: "fallback",
      sections: {
        mastery_analysis: "analysis",
        recommendation_evaluation: "evaluation",
        learning_suggestions: ["do things"],
      },
      recommended_items: ["900"],
      created_at: "now",
    })),
    ...overrides,
  };
  return api as unknown as QuizApi;
}

describe("QuizFlow", () => {
  let flow: QuizFlow;

  beforeEach(() => {
    flow = new QuizFlow(stubApi());
  });

  it("fresh start navigates to the quiz with the first item loaded", async () => {
    await flow.start("", 2);
    expect(flow.screen).toBe("quiz");
    expect(flow.sessionId).toBe("s1");
    expect(flow.item?.item_id).toBe("900");
    expect(flow.stepsDone).toBe(0);
  });

  it("unknown student surfaces the API message and stays on start", async () => {
    const api = stubApi({
      createSession: vi.fn(async () => {
        throw new ApiError(404, "not_found", "unknown student 42");
      }),
    });
    flow = new QuizFlow(api);
    await flow.start("42", 2);
    expect(flow.screen).toBe("start");
    expect(flow.error).toContain("unknown student 42");
  });

  it("zero budget goes straight to the finished/feedback state", async () => {
    const api = stubApi({
      createSession: vi.fn(async () => ({
        session_id: "s1",
        student_id: "fresh",
        status: "finished",
        budget: 0,
        step: 0,
        steps_remaining: 0,
        pending_item: null,
        mastery: [],
      })),
    });
    flow = new QuizFlow(api);
    await flow.start("", 0);
    expect(flow.screen).toBe("feedback");
    expect(flow.feedback?.provider).toBe("fallback");
  });

  it("answering applies the response payload's deltas to the bars", async () => {
    await flow.start("", 2);
    await flow.answer(1);
    const bar = flow.masteryBars().find((b) => b.skillId === "30");
    expect(bar?.value).toBe(0.61);
    expect(bar?.label).toBe("0.61");
    expect(flow.stepsDone).toBe(1);
  });

  it("a conflicting next fetch is surfaced without destroying state", async () => {
    const item = {
      item_id: "900",
      text: "Solve it.",
      knowledge: ["Fractions"],
      step: 0,
      steps_remaining: 2,
    };
    const nextItem = vi
      .fn()
      .mockResolvedValueOnce(item)
      .mockRejectedValue(
        new ApiError(409, "conflict", "an unanswered item is outstanding"),
      );
    flow = new QuizFlow(stubApi({ nextItem }));
    await flow.start("", 2);
    expect(flow.item).toEqual(item);
    await flow.fetchNext(); // item already outstanding
    expect(flow.error).toContain("outstanding");
    expect(flow.screen).toBe("quiz");
    expect(flow.item).toEqual(item); // untouched
  });

  it("the final answer transitions to the feedback screen", async () => {
    const api = stubApi({
      submitResponse: vi.fn(async () => ({
        mastery_deltas: [],
        steps_remaining: 0,
        status: "finished",
      })),
    });
    flow = new QuizFlow(api);
    await flow.start("", 2);
    await flow.answer(0);
    expect(flow.screen).toBe("feedback");
    expect(flow.feedback?.sections.learning_suggestions).toHaveLength(1);
  });

  it("reset returns to a clean start screen", async () => {
    await flow.start("", 2);
    flow.reset();
    expect(flow.screen).toBe("start");
    expect(flow.sessionId).toBeNull();
    expect(flow.mastery).toHaveLength(0);
  });
});
